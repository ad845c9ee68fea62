//! Convex analysis over the belief simplex.
//!
//! A decision problem hands this module one concave evaluator per available
//! alternative (the net utility `N^a`). From those we compute support values of
//! the hypograph of `N = max_a N^a` in a slope direction, the least concave
//! majorant of `N` at a prior together with the posteriors that attain it, and
//! barycentric (Carathéodory) weights.
//!
//! Directions use `J - 1` coordinates: a slope `theta` acts on a belief as
//! `theta . gamma[..J-1]`, i.e. the tilt vector is `(theta, 0)`.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Tolerance on the unit-mass constraint of a [`Belief`].
pub const BELIEF_SUM_TOL: f64 = 1e-12;
/// Relative tolerance for membership in the supported set: `tol * (|delta| + 1)`.
pub const TIE_REL_TOL: f64 = 1e-7;
/// Default point budget for [`simplex_grid`].
pub const DEFAULT_GRID_BUDGET: u128 = 2_000_000;

/// A probability vector over the states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidBelief("no states".into()));
        }
        if let Some(p) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::InvalidBelief(format!("component {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > BELIEF_SUM_TOL {
            return Err(Error::InvalidBelief(format!("components sum to {total}")));
        }
        Ok(Belief(probs))
    }

    /// Normalizes nonnegative masses to a belief. Round-off negatives down to
    /// `-1e-9` are clamped to zero.
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        if masses.iter().any(|m| !m.is_finite() || *m < -1e-9) {
            return Err(Error::InvalidBelief(format!("bad masses {masses:?}")));
        }
        let clamped: Vec<f64> = masses.into_iter().map(|m| m.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidBelief("zero total mass".into()));
        }
        Belief::new(clamped.into_iter().map(|m| (m / total).min(1.0)).collect())
    }

    pub fn uniform(states: usize) -> Self {
        Belief(vec![1.0 / states as f64; states])
    }

    pub fn vertex(states: usize, k: usize) -> Self {
        let mut p = vec![0.0; states];
        p[k] = 1.0;
        Belief(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn states(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|p| *p > 0.0)
    }

    pub fn linf_distance(&self, other: &Belief) -> f64 {
        linf(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for Belief {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Belief::new(v)
    }
}

impl From<Belief> for Vec<f64> {
    fn from(b: Belief) -> Self {
        b.0
    }
}

impl AsRef<[f64]> for Belief {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Slope of a supporting hyperplane in reduced (`J - 1`) coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction(Vec<f64>);

impl Direction {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite direction {theta:?}")));
        }
        Ok(Direction(theta))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    /// Full-length tilt vector `(theta, 0)`.
    pub fn tilt(&self) -> Vec<f64> {
        let mut t = self.0.clone();
        t.push(0.0);
        t
    }
}

/// A concave function on the simplex, possibly `-inf` at some points.
pub trait ConcaveEvaluator {
    fn states(&self) -> usize;

    fn value(&self, gamma: &[f64]) -> f64;

    /// Gradient with respect to all `J` coordinates.
    fn gradient(&self, gamma: &[f64], out: &mut [f64]);

    /// Closed-form maximizer of `value(gamma) - tilt . gamma` over the simplex,
    /// when one is known. The default falls back to a numerical search.
    fn tilted_argmax(&self, _tilt: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportedPosterior {
    pub alternative: usize,
    pub posterior: Belief,
    pub value: f64,
}

/// Support value `delta*` of the hypograph in one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportResult {
    pub value: f64,
    pub supported_posteriors: Vec<SupportedPosterior>,
    /// `(argmax, N^a(argmax) - theta . argmax)` per alternative; `None` when
    /// the alternative is `-inf` everywhere.
    pub per_alternative_argmax: Vec<Option<(Belief, f64)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeSolution {
    pub value: f64,
    pub posteriors: Vec<Belief>,
    /// Alternative whose net utility is tangent at each posterior.
    pub alternatives: Vec<usize>,
    pub weights: Vec<f64>,
    pub optimal_direction: Direction,
    pub values_at_posteriors: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ConcavifyOptions {
    pub tie_rel_tol: f64,
    /// Alternatives within this relative gap of `delta*` at the coarse dual
    /// minimizer are considered for the active set.
    pub candidate_rel_tol: f64,
    /// Centre the dual search on this direction with a narrow initial bracket.
    pub start: Option<Vec<f64>>,
}

impl Default for ConcavifyOptions {
    fn default() -> Self {
        ConcavifyOptions {
            tie_rel_tol: TIE_REL_TOL,
            candidate_rel_tol: 1e-4,
            start: None,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &mut [f64]) {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if s - candidate > 0.0 {
            shift = candidate;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - shift).max(0.0);
    }
}

/// Maximizer and value of `N(gamma) - tilt . gamma`. `None` if nowhere finite.
pub fn tilted_max(ev: &dyn ConcaveEvaluator, tilt: &[f64]) -> Option<(Vec<f64>, f64)> {
    let gamma = match ev.tilted_argmax(tilt) {
        Some(g) => g,
        None => numeric_tilted_argmax(ev, tilt)?,
    };
    let v = ev.value(&gamma) - dot(tilt, &gamma);
    v.is_finite().then_some((gamma, v))
}

/// Grid seed followed by damped projected gradient ascent.
pub fn numeric_tilted_argmax(ev: &dyn ConcaveEvaluator, tilt: &[f64]) -> Option<Vec<f64>> {
    let states = ev.states();
    let phi = |g: &[f64]| ev.value(g) - dot(tilt, g);
    let resolution = if states <= 3 { 0.05 } else { 0.25 };
    let grid = simplex_grid_with(states, resolution, None, DEFAULT_GRID_BUDGET).ok()?;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for b in grid {
        let v = phi(b.probs());
        if v.is_finite() && best.as_ref().is_none_or(|(_, bv)| v > *bv) {
            best = Some((b.into_vec(), v));
        }
    }
    let (mut x, mut fx) = best?;
    // Step off the boundary so gradients that blow up there stay finite.
    if x.contains(&0.0) {
        let interior: Vec<f64> = x.iter().map(|p| 0.999 * p + 0.001 / states as f64).collect();
        let fi = phi(&interior);
        if fi.is_finite() && fi >= fx - 1e-3 {
            x = interior;
            fx = fi;
        }
    }
    let mut grad = vec![0.0; states];
    let mut step = 1.0;
    for _ in 0..20_000 {
        ev.gradient(&x, &mut grad);
        for (g, t) in grad.iter_mut().zip(tilt) {
            *g -= t;
            if !g.is_finite() {
                *g = g.signum() * 1e6;
            }
        }
        let mut accepted = None;
        while step > 1e-20 {
            let mut y: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
            project_to_simplex(&mut y);
            let fy = phi(&y);
            let ascent: f64 = grad.iter().zip(y.iter().zip(&x)).map(|(g, (a, b))| g * (a - b)).sum();
            let dist2: f64 = y.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if fy.is_finite() && fy >= fx + ascent - dist2 / (2.0 * step) {
                accepted = Some((y, fy));
                break;
            }
            step *= 0.5;
        }
        let Some((y, fy)) = accepted else { break };
        let moved = linf(&x, &y);
        x = y;
        fx = fy;
        step *= 2.0;
        if moved < 1e-15 {
            break;
        }
    }
    Some(x)
}

pub fn support_function(
    evaluators: &[&dyn ConcaveEvaluator],
    theta: &Direction,
) -> Result<SupportResult> {
    support_function_with(evaluators, theta, TIE_REL_TOL)
}

pub fn support_function_with(
    evaluators: &[&dyn ConcaveEvaluator],
    theta: &Direction,
    tie_rel_tol: f64,
) -> Result<SupportResult> {
    let tilt = theta.tilt();
    if let Some(bad) = evaluators.iter().find(|e| e.states() != tilt.len()) {
        return Err(Error::InvalidInput(format!(
            "evaluator over {} states, direction implies {}",
            bad.states(),
            tilt.len()
        )));
    }
    let mut per = Vec::with_capacity(evaluators.len());
    for ev in evaluators {
        let entry = match tilted_max(*ev, &tilt) {
            Some((g, v)) => Some((Belief::from_masses(g)?, v)),
            None => None,
        };
        per.push(entry);
    }
    let value = per
        .iter()
        .flatten()
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if !value.is_finite() {
        return Err(Error::NonFinite);
    }
    let tol = tie_rel_tol * (value.abs() + 1.0);
    let supported_posteriors = per
        .iter()
        .enumerate()
        .filter_map(|(a, e)| match e {
            Some((b, v)) if *v >= value - tol => Some(SupportedPosterior {
                alternative: a,
                posterior: b.clone(),
                value: *v,
            }),
            _ => None,
        })
        .collect();
    Ok(SupportResult {
        value,
        supported_posteriors,
        per_alternative_argmax: per,
    })
}

/// Unique barycentric weights of `mu` with respect to affinely independent points.
pub fn caratheodory_weights(points: &[Belief], mu: &Belief) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no points".into()));
    }
    let states = mu.states();
    if points.iter().any(|p| p.states() != states) {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    let n = points.len();
    let m = DMatrix::from_fn(states, n, |r, c| points[c].probs()[r]);
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-9 * smax.max(1e-300))
        .count();
    if n > states || rank < n {
        return Err(Error::RankDeficient { rank, points: n });
    }
    let rhs = DVector::from_column_slice(mu.probs());
    let w = svd
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let residual = (&m * &w - &rhs).amax();
    if residual > 1e-8 {
        return Err(Error::Infeasible { residual });
    }
    if let Some(neg) = w.iter().copied().find(|x| *x < -1e-9) {
        return Err(Error::Infeasible { residual: -neg });
    }
    let clamped: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    Ok(clamped.into_iter().map(|x| x / total).collect())
}

pub fn simplex_grid(states: usize, resolution: f64) -> Result<Vec<Belief>> {
    simplex_grid_with(states, resolution, None, DEFAULT_GRID_BUDGET)
}

/// Lattice `{k / n}` on the simplex with `n = ceil(1 / resolution)`, vertices
/// included, plus an optional snap point appended when it is off-lattice.
pub fn simplex_grid_with(
    states: usize,
    resolution: f64,
    snap: Option<&Belief>,
    budget: u128,
) -> Result<Vec<Belief>> {
    if states == 0 || !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::InvalidInput(format!(
            "grid needs states >= 1 and resolution > 0, got {states}, {resolution}"
        )));
    }
    let n = (1.0 / resolution - 1e-9).ceil().max(1.0) as u64;
    let count = lattice_size(n, states as u64);
    if count > budget {
        return Err(Error::TooLarge {
            points: count,
            budget,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut parts = vec![0u64; states];
    fill_compositions(n, 0, &mut parts, &mut out);
    if let Some(s) = snap {
        if out.iter().all(|b| b.linf_distance(s) > 1e-12) {
            out.push(s.clone());
        }
    }
    Ok(out)
}

fn lattice_size(n: u64, states: u64) -> u128 {
    // C(n + states - 1, states - 1), saturating.
    let k = states - 1;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n + k - i) as u128) / (i as u128 + 1);
    }
    acc
}

fn fill_compositions(n: u64, pos: usize, parts: &mut [u64], out: &mut Vec<Belief>) {
    let used: u64 = parts[..pos].iter().sum();
    if pos == parts.len() - 1 {
        parts[pos] = n - used;
        out.push(Belief(parts.iter().map(|k| *k as f64 / n as f64).collect()));
        return;
    }
    for k in (0..=n - used).rev() {
        parts[pos] = k;
        fill_compositions(n, pos + 1, parts, out);
    }
}

/// Dual objective `delta*(theta) + theta . mu[..J-1]`.
pub fn dual_objective(evaluators: &[&dyn ConcaveEvaluator], mu: &Belief, theta: &[f64]) -> f64 {
    let mut tilt = theta.to_vec();
    tilt.push(0.0);
    let delta = evaluators
        .iter()
        .filter_map(|e| tilted_max(*e, &tilt).map(|(_, v)| v))
        .fold(f64::NEG_INFINITY, f64::max);
    delta + dot(theta, &mu.probs()[..theta.len()])
}

pub fn concavify_at_prior(
    evaluators: &[&dyn ConcaveEvaluator],
    mu: &Belief,
) -> Result<EnvelopeSolution> {
    concavify_at_prior_with(evaluators, mu, &ConcavifyOptions::default())
}

/// Least concave majorant of `max_a N^a` at `mu`, with the supporting
/// posteriors and their Bayes-plausible weights.
pub fn concavify_at_prior_with(
    evaluators: &[&dyn ConcaveEvaluator],
    mu: &Belief,
    opts: &ConcavifyOptions,
) -> Result<EnvelopeSolution> {
    let states = mu.states();
    if evaluators.is_empty() || evaluators.iter().any(|e| e.states() != states) {
        return Err(Error::InvalidInput("evaluators do not match the prior".into()));
    }
    let support: Vec<usize> = (0..states).filter(|j| mu.probs()[*j] > 0.0).collect();
    if support.len() == 1 {
        return point_solution(evaluators, mu, &vec![0.0; states - 1]);
    }
    if support.len() < states {
        return concavify_on_face(evaluators, mu, &support, opts);
    }
    let live: Vec<usize> = (0..evaluators.len())
        .filter(|a| evaluators[*a].value(mu.probs()).is_finite() || has_finite_point(evaluators[*a]))
        .collect();
    if live.is_empty() {
        return Err(Error::NonFinite);
    }
    let start = opts.start.as_deref().filter(|s| s.len() == states - 1);
    let theta0 = coarse_dual_minimizer(evaluators, &live, mu, start)?;
    polish(evaluators, &live, mu, &theta0, opts)
}

fn has_finite_point(ev: &dyn ConcaveEvaluator) -> bool {
    let states = ev.states();
    (0..states).any(|k| ev.value(Belief::vertex(states, k).probs()).is_finite())
        || ev.value(Belief::uniform(states).probs()).is_finite()
}

fn point_solution(
    evaluators: &[&dyn ConcaveEvaluator],
    mu: &Belief,
    theta: &[f64],
) -> Result<EnvelopeSolution> {
    let (alt, value) = evaluators
        .iter()
        .enumerate()
        .map(|(a, e)| (a, e.value(mu.probs())))
        .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        });
    if !value.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(EnvelopeSolution {
        value,
        posteriors: vec![mu.clone()],
        alternatives: vec![alt],
        weights: vec![1.0],
        optimal_direction: Direction::new(theta.to_vec())?,
        values_at_posteriors: vec![value],
    })
}

struct FaceEvaluator<'a> {
    inner: &'a dyn ConcaveEvaluator,
    support: &'a [usize],
    full: usize,
}

impl FaceEvaluator<'_> {
    fn embed(&self, sub: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.full];
        for (k, j) in self.support.iter().enumerate() {
            g[*j] = sub[k];
        }
        g
    }
}

impl ConcaveEvaluator for FaceEvaluator<'_> {
    fn states(&self) -> usize {
        self.support.len()
    }
    fn value(&self, gamma: &[f64]) -> f64 {
        self.inner.value(&self.embed(gamma))
    }
    fn gradient(&self, gamma: &[f64], out: &mut [f64]) {
        let mut full = vec![0.0; self.full];
        self.inner.gradient(&self.embed(gamma), &mut full);
        for (k, j) in self.support.iter().enumerate() {
            out[k] = full[*j];
        }
    }
}

fn concavify_on_face(
    evaluators: &[&dyn ConcaveEvaluator],
    mu: &Belief,
    support: &[usize],
    opts: &ConcavifyOptions,
) -> Result<EnvelopeSolution> {
    let states = mu.states();
    let faces: Vec<FaceEvaluator> = evaluators
        .iter()
        .map(|e| FaceEvaluator {
            inner: *e,
            support,
            full: states,
        })
        .collect();
    let refs: Vec<&dyn ConcaveEvaluator> = faces.iter().map(|f| f as &dyn ConcaveEvaluator).collect();
    let sub_mu = Belief::from_masses(support.iter().map(|j| mu.probs()[*j]).collect())?;
    let sub = concavify_at_prior_with(&refs, &sub_mu, &ConcavifyOptions { start: None, ..opts.clone() })?;
    let mut tilt = vec![0.0; states];
    let sub_tilt = sub.optimal_direction.tilt();
    for (k, j) in support.iter().enumerate() {
        tilt[*j] = sub_tilt[k];
    }
    let posteriors = sub
        .posteriors
        .iter()
        .map(|p| Belief::from_masses(faces[0].embed(p.probs())))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnvelopeSolution {
        value: sub.value,
        posteriors,
        alternatives: sub.alternatives,
        weights: sub.weights,
        optimal_direction: Direction::new(tilt[..states - 1].to_vec())?,
        values_at_posteriors: sub.values_at_posteriors,
    })
}

fn golden_min(f: &mut dyn FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Nested golden-section search over the box `center + [-bound, bound]^r`.
/// The dual is convex, and partial minimization preserves convexity, so each
/// level is unimodal.
fn nested_golden(
    f: &dyn Fn(&[f64]) -> f64,
    prefix: &mut Vec<f64>,
    center: &[f64],
    bound: f64,
    tol: f64,
) -> (Vec<f64>, f64) {
    let r = center.len();
    let c = center[prefix.len()];
    if prefix.len() + 1 == r {
        let mut buf = prefix.clone();
        buf.push(0.0);
        let last = r - 1;
        let (t, v) = golden_min(
            &mut |t| {
                buf[last] = t;
                f(&buf)
            },
            c - bound,
            c + bound,
            tol,
        );
        let mut out = prefix.clone();
        out.push(t);
        return (out, v);
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    let (_, _) = golden_min(
        &mut |t| {
            prefix.push(t);
            let (x, v) = nested_golden(f, prefix, center, bound, tol);
            prefix.pop();
            if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
                best = Some((x, v));
            }
            v
        },
        c - bound,
        c + bound,
        tol,
    );
    best.expect("golden search evaluates at least once")
}

fn coarse_dual_minimizer(
    evaluators: &[&dyn ConcaveEvaluator],
    live: &[usize],
    mu: &Belief,
    start: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let states = mu.states();
    let r = states - 1;
    let mut grad = vec![0.0; states];
    let mut spread: f64 = 0.0;
    for a in live {
        evaluators[*a].gradient(mu.probs(), &mut grad);
        for k in 0..r {
            let s = grad[k] - grad[r];
            if s.is_finite() {
                spread = spread.max(s.abs());
            }
        }
    }
    let subset: Vec<&dyn ConcaveEvaluator> = live.iter().map(|a| evaluators[*a]).collect();
    let f = |theta: &[f64]| dual_objective(&subset, mu, theta);
    let (center, mut bound) = match start {
        Some(s) => (s.to_vec(), 1.0),
        None => (vec![0.0; r], 2.0 * (1.0 + spread)),
    };
    let mut prev: Option<(Vec<f64>, f64)> = None;
    for _ in 0..16 {
        let tol = 1e-7 * (1.0 + bound);
        let (theta, value) = nested_golden(&f, &mut Vec::with_capacity(r), &center, bound, tol);
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        if theta.iter().zip(&center).all(|(t, c)| (t - c).abs() < 0.95 * bound) {
            return Ok(theta);
        }
        // A posterior on a face of the simplex leaves the dual flat along a
        // ray; stop once widening the bracket no longer lowers the value.
        if let Some((p, pv)) = prev.take() {
            if value >= pv - 1e-10 * (1.0 + pv.abs()) {
                return Ok(p);
            }
        }
        prev = Some((theta, value));
        bound *= 4.0;
    }
    Err(Error::NoConvergence(
        "dual minimizer escapes every bracket".into(),
    ))
}

struct KktPoint {
    theta: Vec<f64>,
    weights: Vec<f64>,
    posteriors: Vec<Vec<f64>>,
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn go(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            go(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(items, k, 0, &mut Vec::new(), &mut out);
    out
}

fn polish(
    evaluators: &[&dyn ConcaveEvaluator],
    live: &[usize],
    mu: &Belief,
    theta0: &[f64],
    opts: &ConcavifyOptions,
) -> Result<EnvelopeSolution> {
    let states = mu.states();
    let mut tilt0 = theta0.to_vec();
    tilt0.push(0.0);
    let parts: Vec<(usize, f64)> = live
        .iter()
        .filter_map(|a| tilted_max(evaluators[*a], &tilt0).map(|(_, v)| (*a, v)))
        .collect();
    let delta = parts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if !delta.is_finite() {
        return Err(Error::NonFinite);
    }
    let loose = opts.candidate_rel_tol * (delta.abs() + 1.0);
    let candidates: Vec<usize> = parts
        .iter()
        .filter(|(_, v)| *v >= delta - loose)
        .map(|(a, _)| *a)
        .collect();

    let subset_evs: Vec<&dyn ConcaveEvaluator> = live.iter().map(|a| evaluators[*a]).collect();
    let bound = dual_objective(&subset_evs, mu, theta0);
    let mut tried: Vec<Vec<usize>> = Vec::new();
    let mut rank_failure = None;
    for pool in [&candidates[..], live] {
        for size in 1..=pool.len().min(states) {
            for subset in combinations(pool, size) {
                if tried.contains(&subset) {
                    continue;
                }
                tried.push(subset.clone());
                let Some(point) = kkt_newton(evaluators, &subset, mu, theta0) else {
                    continue;
                };
                match accept(evaluators, live, &subset, mu, point, opts) {
                    // weak duality: no Bayes-plausible policy exceeds the dual
                    // bound, and the optimum attains it
                    Ok(Some(sol)) if sol.value >= bound - 1e-7 * (1.0 + bound.abs()) => return Ok(sol),
                    Ok(Some(_)) => {}
                    Ok(None) => {}
                    Err(e @ Error::RankDeficient { .. }) => rank_failure = Some(e),
                    Err(e) => return Err(e),
                }
            }
        }
        if pool.len() > 6 {
            break;
        }
    }
    match rank_failure {
        Some(e) => Err(Error::DegenerateSupport(format!(
            "prior is not a unique convex combination of supported posteriors: {e}"
        ))),
        None => Err(Error::NoConvergence(format!(
            "no active set satisfies the tangency conditions near theta = {theta0:?}"
        ))),
    }
}

fn residuals(
    evaluators: &[&dyn ConcaveEvaluator],
    subset: &[usize],
    mu: &Belief,
    z: &[f64],
) -> Option<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    let states = mu.states();
    let r = states - 1;
    let (theta, w) = z.split_at(r);
    let mut tilt = theta.to_vec();
    tilt.push(0.0);
    let mut gammas = Vec::with_capacity(subset.len());
    let mut hs = Vec::with_capacity(subset.len());
    for a in subset {
        let (g, h) = tilted_max(evaluators[*a], &tilt)?;
        gammas.push(g);
        hs.push(h);
    }
    let mut f = Vec::with_capacity(z.len());
    for k in 1..subset.len() {
        f.push(hs[k] - hs[0]);
    }
    for i in 0..r {
        let mix: f64 = w.iter().zip(&gammas).map(|(wk, g)| wk * g[i]).sum();
        f.push(mix - mu.probs()[i]);
    }
    f.push(w.iter().sum::<f64>() - 1.0);
    Some((f, gammas, hs))
}

/// Newton iteration on the tangency system for a fixed active set:
/// equal support values across the set, Bayes plausibility, unit mass.
fn kkt_newton(
    evaluators: &[&dyn ConcaveEvaluator],
    subset: &[usize],
    mu: &Belief,
    theta0: &[f64],
) -> Option<KktPoint> {
    let states = mu.states();
    let r = states - 1;
    let m = subset.len();
    let n = r + m;
    let mut tilt0 = theta0.to_vec();
    tilt0.push(0.0);
    let start_gammas: Vec<Vec<f64>> = subset
        .iter()
        .map(|a| tilted_max(evaluators[*a], &tilt0).map(|(g, _)| g))
        .collect::<Option<_>>()?;
    let w0 = if m == 1 {
        vec![1.0]
    } else {
        let mat = DMatrix::from_fn(states, m, |i, k| start_gammas[k][i]);
        let rhs = DVector::from_column_slice(mu.probs());
        let sol = mat.svd(true, true).solve(&rhs, 1e-12).ok()?;
        let clipped: Vec<f64> = sol.iter().map(|x| x.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        if total > 0.0 {
            clipped.iter().map(|x| x / total).collect()
        } else {
            vec![1.0 / m as f64; m]
        }
    };
    let mut z: Vec<f64> = theta0.iter().copied().chain(w0).collect();
    let scale = 1.0 + theta0.iter().fold(0.0f64, |s, t| s.max(t.abs()));
    let (mut f, mut gammas, mut hs) = residuals(evaluators, subset, mu, &z)?;
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    for _ in 0..80 {
        let hscale = 1.0 + hs.iter().fold(0.0f64, |s, h| s.max(h.abs()));
        if norm(&f) < 1e-12 * hscale {
            return Some(KktPoint {
                theta: z[..r].to_vec(),
                weights: z[r..].to_vec(),
                posteriors: gammas,
            });
        }
        let mut jac = DMatrix::<f64>::zeros(n, n);
        // Envelope theorem: d h_a / d theta = -gamma_a[..r].
        for k in 1..m {
            for i in 0..r {
                jac[(k - 1, i)] = -(gammas[k][i] - gammas[0][i]);
            }
        }
        let eps = 1e-7 * scale;
        for i in 0..r {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += eps;
            zm[i] -= eps;
            let mut tp = zp[..r].to_vec();
            tp.push(0.0);
            let mut tm = zm[..r].to_vec();
            tm.push(0.0);
            for (k, a) in subset.iter().enumerate() {
                let gp = tilted_max(evaluators[*a], &tp)?.0;
                let gm = tilted_max(evaluators[*a], &tm)?.0;
                for row in 0..r {
                    jac[(m - 1 + row, i)] += z[r + k] * (gp[row] - gm[row]) / (2.0 * eps);
                }
            }
        }
        for k in 0..m {
            for row in 0..r {
                jac[(m - 1 + row, r + k)] = gammas[k][row];
            }
            jac[(n - 1, r + k)] = 1.0;
        }
        let rhs = DVector::from_iterator(n, f.iter().map(|x| -x));
        let step = jac.lu().solve(&rhs)?;
        let current = norm(&f);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-10 {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            if let Some((ft, gt, ht)) = residuals(evaluators, subset, mu, &trial) {
                if norm(&ft) < (1.0 - 1e-4 * t) * current {
                    z = trial;
                    f = ft;
                    gammas = gt;
                    hs = ht;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let hscale = 1.0 + hs.iter().fold(0.0f64, |s, h| s.max(h.abs()));
    (norm(&f) < 1e-9 * hscale).then(|| KktPoint {
        theta: z[..r].to_vec(),
        weights: z[r..].to_vec(),
        posteriors: gammas,
    })
}

fn accept(
    evaluators: &[&dyn ConcaveEvaluator],
    live: &[usize],
    subset: &[usize],
    mu: &Belief,
    point: KktPoint,
    opts: &ConcavifyOptions,
) -> Result<Option<EnvelopeSolution>> {
    if point.weights.iter().any(|w| *w < -1e-10) {
        return Ok(None);
    }
    let mut tilt = point.theta.clone();
    tilt.push(0.0);
    let mut delta = f64::NEG_INFINITY;
    let mut active = f64::NEG_INFINITY;
    for a in live {
        if let Some((_, v)) = tilted_max(evaluators[*a], &tilt) {
            delta = delta.max(v);
            if subset.contains(a) {
                active = active.max(v);
            }
        }
    }
    if delta > active + opts.tie_rel_tol * (active.abs() + 1.0) {
        return Ok(None);
    }
    // Keep atoms with positive mass; a one-point policy sits exactly at the prior.
    let keep: Vec<usize> = (0..subset.len()).filter(|k| point.weights[*k] > 1e-14).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let (posteriors, weights) = if keep.len() == 1 {
        if linf(&point.posteriors[keep[0]], mu.probs()) > 1e-6 {
            return Ok(None);
        }
        (vec![mu.clone()], vec![1.0])
    } else {
        let posts = keep
            .iter()
            .map(|k| Belief::from_masses(point.posteriors[*k].clone()))
            .collect::<Result<Vec<_>>>()?;
        let w = match caratheodory_weights(&posts, mu) {
            Ok(w) => w,
            Err(e @ Error::RankDeficient { .. }) => return Err(e),
            Err(_) => {
                let total: f64 = keep.iter().map(|k| point.weights[*k].max(0.0)).sum();
                keep.iter().map(|k| point.weights[*k].max(0.0) / total).collect()
            }
        };
        let mut mix = vec![0.0; mu.states()];
        for (wk, p) in w.iter().zip(&posts) {
            for (m, g) in mix.iter_mut().zip(p.probs()) {
                *m += wk * g;
            }
        }
        if linf(&mix, mu.probs()) > 1e-8 {
            return Ok(None);
        }
        (posts, w)
    };
    let alternatives: Vec<usize> = keep.iter().map(|k| subset[*k]).collect();
    let values_at_posteriors: Vec<f64> = alternatives
        .iter()
        .zip(&posteriors)
        .map(|(a, p)| evaluators[*a].value(p.probs()))
        .collect();
    let value = weights.iter().zip(&values_at_posteriors).map(|(w, v)| w * v).sum();
    Ok(Some(EnvelopeSolution {
        value,
        posteriors,
        alternatives,
        weights,
        optimal_direction: Direction::new(point.theta)?,
        values_at_posteriors,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// `gamma . u + e - kappa * ||gamma - center||^2`, no closed form offered.
    struct Quad {
        u: Vec<f64>,
        e: f64,
        kappa: f64,
        center: Vec<f64>,
    }

    impl ConcaveEvaluator for Quad {
        fn states(&self) -> usize {
            self.u.len()
        }
        fn value(&self, g: &[f64]) -> f64 {
            let c: f64 = g.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum();
            dot(g, &self.u) + self.e - self.kappa * c
        }
        fn gradient(&self, g: &[f64], out: &mut [f64]) {
            for j in 0..g.len() {
                out[j] = self.u[j] - 2.0 * self.kappa * (g[j] - self.center[j]);
            }
        }
    }

    fn example_one() -> (Quad, Quad) {
        // kappa = 2 on the full vector gives 4 (gamma - 1/2)^2 in one coordinate.
        let a = Quad { u: vec![10.0, 5.0], e: 1.0, kappa: 2.0, center: vec![0.5, 0.5] };
        let b = Quad { u: vec![12.0, 3.0], e: 2.0, kappa: 2.0, center: vec![0.5, 0.5] };
        (a, b)
    }

    #[test]
    fn support_values_match_figure_lines() {
        let (a, b) = example_one();
        let evs: Vec<&dyn ConcaveEvaluator> = vec![&a, &b];
        let s7 = support_function(&evs, &Direction::new(vec![7.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(s7.value, 25.0 / 4.0, epsilon = 1e-9);
        assert_eq!(s7.supported_posteriors.len(), 1);
        assert_eq!(s7.supported_posteriors[0].alternative, 1);
        assert_abs_diff_eq!(s7.supported_posteriors[0].posterior.probs()[0], 0.75, epsilon = 1e-7);
        let s8 = support_function(&evs, &Direction::new(vec![8.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(s8.value, 89.0 / 16.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s8.supported_posteriors[0].posterior.probs()[0], 0.625, epsilon = 1e-7);
    }

    #[test]
    fn single_alternative_support_at_prior() {
        let q = Quad { u: vec![3.0, 3.0], e: 0.5, kappa: 1.0, center: vec![0.3, 0.7] };
        let evs: Vec<&dyn ConcaveEvaluator> = vec![&q];
        let s = support_function(&evs, &Direction::new(vec![0.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(s.value, 3.5, epsilon = 1e-10);
        assert_abs_diff_eq!(s.supported_posteriors[0].posterior.probs()[0], 0.3, epsilon = 1e-7);
    }

    struct NegInf;
    impl ConcaveEvaluator for NegInf {
        fn states(&self) -> usize {
            2
        }
        fn value(&self, _: &[f64]) -> f64 {
            f64::NEG_INFINITY
        }
        fn gradient(&self, _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    #[test]
    fn all_infinite_is_non_finite() {
        let evs: Vec<&dyn ConcaveEvaluator> = vec![&NegInf, &NegInf];
        let err = support_function(&evs, &Direction::new(vec![1.0]).unwrap()).unwrap_err();
        assert_eq!(err, Error::NonFinite);
        let mu = Belief::uniform(2);
        assert_eq!(concavify_at_prior(&evs, &mu).unwrap_err(), Error::NonFinite);
    }

    #[test]
    fn example_one_concavification_is_no_learning() {
        let (a, b) = example_one();
        let evs: Vec<&dyn ConcaveEvaluator> = vec![&a, &b];
        let sol = concavify_at_prior(&evs, &Belief::uniform(2)).unwrap();
        assert_abs_diff_eq!(sol.value, 9.5, epsilon = 1e-9);
        assert_eq!(sol.posteriors.len(), 1);
        assert_eq!(sol.alternatives, vec![1]);
        assert_abs_diff_eq!(sol.optimal_direction.coords()[0], 9.0, epsilon = 1e-6);
    }

    #[test]
    fn caratheodory_cases() {
        let pts = vec![Belief::new(vec![0.0, 1.0]).unwrap(), Belief::new(vec![1.0, 0.0]).unwrap()];
        let w = caratheodory_weights(&pts, &Belief::new(vec![0.3, 0.7]).unwrap()).unwrap();
        assert_abs_diff_eq!(w[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.3, epsilon = 1e-12);

        let mu = Belief::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(caratheodory_weights(&[mu.clone()], &mu).unwrap(), vec![1.0]);

        let three = vec![
            Belief::new(vec![0.1, 0.9]).unwrap(),
            Belief::new(vec![0.6, 0.4]).unwrap(),
            Belief::new(vec![0.9, 0.1]).unwrap(),
        ];
        assert!(matches!(
            caratheodory_weights(&three, &Belief::uniform(2)),
            Err(Error::RankDeficient { .. })
        ));

        let outside = caratheodory_weights(
            &[Belief::new(vec![0.6, 0.4]).unwrap(), Belief::new(vec![0.9, 0.1]).unwrap()],
            &Belief::uniform(2),
        );
        assert!(matches!(outside, Err(Error::Infeasible { .. })));
    }

    #[test]
    fn grid_enumeration() {
        let g = simplex_grid(2, 0.5).unwrap();
        let pts: Vec<Vec<f64>> = g.into_iter().map(Belief::into_vec).collect();
        assert_eq!(pts, vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_eq!(simplex_grid(3, 1.0).unwrap().len(), 3);
        assert_eq!(simplex_grid(2, 0.25).unwrap().len(), 5);
        assert_eq!(simplex_grid(3, 0.1).unwrap().len(), 66);
        assert!(matches!(
            simplex_grid_with(3, 1e-4, None, 1000),
            Err(Error::TooLarge { .. })
        ));
        let snap = Belief::new(vec![0.3, 0.7]).unwrap();
        let g = simplex_grid_with(2, 0.5, Some(&snap), 10).unwrap();
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn belief_validation() {
        assert!(Belief::new(vec![0.5, 0.4]).is_err());
        assert!(Belief::new(vec![1.2, -0.2]).is_err());
        assert!(Belief::new(vec![]).is_err());
        assert!(Belief::new(vec![0.25, 0.75]).is_ok());
        assert!(Direction::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn projection_lands_on_simplex() {
        let mut v = vec![2.0, -1.0, 0.5];
        project_to_simplex(&mut v);
        assert_abs_diff_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(v.iter().all(|x| *x >= 0.0));
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn boundary_prior_is_a_face_problem() {
        let (a, b) = example_one();
        let evs: Vec<&dyn ConcaveEvaluator> = vec![&a, &b];
        let sol = concavify_at_prior(&evs, &Belief::vertex(2, 0)).unwrap();
        assert_eq!(sol.posteriors, vec![Belief::vertex(2, 0)]);
        // N^a(1) = 10, N^b(1) = 13.
        assert_abs_diff_eq!(sol.value, 13.0, epsilon = 1e-12);
    }
}

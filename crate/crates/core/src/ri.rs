//! One rational-inattention decision problem and its solution.

use crate::error::{Error, Result};
use crate::geometry::{
    concavify_at_prior_with, dot, support_function, Belief, ConcavifyOptions, ConcaveEvaluator,
    EnvelopeSolution,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Tolerance for Bayes plausibility of a policy passed to [`policy_value`].
pub const POLICY_FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostFamily {
    /// `kappa * ||gamma - mu||^2`
    Quadratic,
    /// `kappa * sum gamma ln(gamma / mu)`
    KlToPrior,
    /// `kappa * (sum gamma^2 / mu - 1)`
    Tsallis,
}

impl CostFamily {
    pub fn infinite_at_boundary(self) -> bool {
        matches!(self, CostFamily::KlToPrior | CostFamily::Tsallis)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionCost {
    pub family: CostFamily,
    pub scale: f64,
    pub center: Belief,
}

impl AttentionCost {
    pub fn new(family: CostFamily, scale: f64, center: Belief) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!("cost scale must be positive, got {scale}")));
        }
        if family.infinite_at_boundary() {
            if let Some(j) = center.probs().iter().position(|p| *p <= 0.0) {
                return Err(Error::ZeroPriorState { state: j });
            }
        }
        Ok(AttentionCost {
            family,
            scale,
            center,
        })
    }

    pub fn value(&self, gamma: &[f64]) -> f64 {
        let mu = self.center.probs();
        let k = self.scale;
        match self.family {
            CostFamily::Quadratic => {
                k * gamma.iter().zip(mu).map(|(g, m)| (g - m) * (g - m)).sum::<f64>()
            }
            CostFamily::KlToPrior => {
                k * gamma
                    .iter()
                    .zip(mu)
                    .map(|(g, m)| if *g > 0.0 { g * (g / m).ln() } else { 0.0 })
                    .sum::<f64>()
            }
            // Written as a chi-square distance so the value at the center is exactly zero.
            CostFamily::Tsallis => {
                k * gamma.iter().zip(mu).map(|(g, m)| (g - m) * (g - m) / m).sum::<f64>()
            }
        }
    }

    pub fn gradient(&self, gamma: &[f64], out: &mut [f64]) {
        let mu = self.center.probs();
        let k = self.scale;
        for ((o, g), m) in out.iter_mut().zip(gamma).zip(mu) {
            *o = match self.family {
                CostFamily::Quadratic => 2.0 * k * (g - m),
                CostFamily::KlToPrior => k * ((g / m).ln() + 1.0),
                CostFamily::Tsallis => 2.0 * k * g / m,
            };
        }
    }

    /// Maximizer of `gamma . v - T(gamma)` over the simplex.
    pub fn tilted_argmax(&self, v: &[f64]) -> Vec<f64> {
        let mu = self.center.probs();
        let k = self.scale;
        match self.family {
            CostFamily::Quadratic => {
                let mut g: Vec<f64> = mu.iter().zip(v).map(|(m, x)| m + x / (2.0 * k)).collect();
                crate::geometry::project_to_simplex(&mut g);
                g
            }
            CostFamily::KlToPrior => {
                let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = mu
                    .iter()
                    .zip(v)
                    .map(|(m, x)| if *m > 0.0 { m * ((x - top) / k).exp() } else { 0.0 })
                    .collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            }
            CostFamily::Tsallis => {
                // gamma_j = max(0, mu_j (v_j - nu) / (2 kappa)) with nu fixed by unit mass.
                let mut order: Vec<usize> = (0..v.len()).collect();
                order.sort_by(|a, b| v[*b].total_cmp(&v[*a]));
                let mut nu = 0.0;
                let (mut mass, mut weighted) = (0.0, 0.0);
                for (rank, j) in order.iter().enumerate() {
                    mass += mu[*j];
                    weighted += mu[*j] * v[*j];
                    let candidate = (weighted - 2.0 * k) / mass;
                    let next_inactive = order.get(rank + 1).is_none_or(|n| v[*n] <= candidate);
                    if v[*j] > candidate && next_inactive {
                        nu = candidate;
                        break;
                    }
                }
                let g: Vec<f64> = mu
                    .iter()
                    .zip(v)
                    .map(|(m, x)| (m * (x - nu) / (2.0 * k)).max(0.0))
                    .collect();
                let total: f64 = g.iter().sum();
                g.into_iter().map(|x| x / total).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub alternatives: Vec<String>,
    pub states: Vec<String>,
    pub prior: Belief,
    /// `utility[a][j] = u_a(omega_j)`
    pub utility: Vec<Vec<f64>>,
    /// `E(a)`; `-inf` marks an unavailable alternative.
    pub disturbance: Vec<f64>,
    pub cost: AttentionCost,
}

impl Instance {
    pub fn new(
        alternatives: Vec<String>,
        states: Vec<String>,
        prior: Belief,
        utility: Vec<Vec<f64>>,
        disturbance: Vec<f64>,
        cost: AttentionCost,
    ) -> Result<Self> {
        let k = alternatives.len();
        let j = states.len();
        if k == 0 || j == 0 {
            return Err(Error::InvalidInput("need at least one alternative and one state".into()));
        }
        if prior.states() != j || cost.center.states() != j {
            return Err(Error::InvalidInput("prior or cost center has the wrong length".into()));
        }
        if utility.len() != k || utility.iter().any(|row| row.len() != j) {
            return Err(Error::InvalidInput(format!("utility must be {k} x {j}")));
        }
        if utility.iter().flatten().any(|u| !u.is_finite()) {
            return Err(Error::InvalidInput("utilities must be finite".into()));
        }
        if disturbance.len() != k || disturbance.iter().any(|e| e.is_nan() || *e == f64::INFINITY) {
            return Err(Error::InvalidInput("disturbance must hold K reals or -inf".into()));
        }
        Ok(Instance {
            alternatives,
            states,
            prior,
            utility,
            disturbance,
            cost,
        })
    }

    /// Instance with generated labels `a0, a1, ...` and `w0, w1, ...`.
    pub fn from_parts(
        prior: Belief,
        utility: Vec<Vec<f64>>,
        disturbance: Vec<f64>,
        family: CostFamily,
        scale: f64,
    ) -> Result<Self> {
        let k = utility.len();
        let j = prior.states();
        let cost = AttentionCost::new(family, scale, prior.clone())?;
        Instance::new(
            (0..k).map(|a| format!("a{a}")).collect(),
            (0..j).map(|s| format!("w{s}")).collect(),
            prior,
            utility,
            disturbance,
            cost,
        )
    }

    pub fn num_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn available(&self) -> Vec<usize> {
        (0..self.num_alternatives())
            .filter(|a| self.disturbance[*a].is_finite())
            .collect()
    }

    pub fn evaluator(&self, alternative: usize) -> NetUtility<'_> {
        NetUtility {
            instance: self,
            alternative,
        }
    }

    /// Copy with `c` added to every utility entry.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        for u in out.utility.iter_mut().flatten() {
            *u += c;
        }
        out
    }
}

/// `N^a(gamma) = gamma . u_a + E(a) - T(gamma)`
pub struct NetUtility<'a> {
    instance: &'a Instance,
    alternative: usize,
}

impl ConcaveEvaluator for NetUtility<'_> {
    fn states(&self) -> usize {
        self.instance.num_states()
    }

    fn value(&self, gamma: &[f64]) -> f64 {
        net_utility_raw(self.instance, self.alternative, gamma)
    }

    fn gradient(&self, gamma: &[f64], out: &mut [f64]) {
        self.instance.cost.gradient(gamma, out);
        for (o, u) in out.iter_mut().zip(&self.instance.utility[self.alternative]) {
            *o = u - *o;
        }
    }

    fn tilted_argmax(&self, tilt: &[f64]) -> Option<Vec<f64>> {
        let v: Vec<f64> = self.instance.utility[self.alternative]
            .iter()
            .zip(tilt)
            .map(|(u, t)| u - t)
            .collect();
        Some(self.instance.cost.tilted_argmax(&v))
    }
}

fn net_utility_raw(instance: &Instance, a: usize, gamma: &[f64]) -> f64 {
    let e = instance.disturbance[a];
    if e == f64::NEG_INFINITY {
        return e;
    }
    dot(gamma, &instance.utility[a]) + e - instance.cost.value(gamma)
}

pub fn net_utility(instance: &Instance, alternative: usize, gamma: &Belief) -> f64 {
    net_utility_raw(instance, alternative, gamma.probs())
}

/// `N(gamma) = max_a N^a(gamma)`, ties to the lowest index.
pub fn objective_upper_envelope(instance: &Instance, gamma: &Belief) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for a in 0..instance.num_alternatives() {
        let v = net_utility(instance, a, gamma);
        if v > best.0 {
            best = (v, a);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPolicy {
    pub posteriors: Vec<Belief>,
    pub weights: Vec<f64>,
    /// `choice[k][a] = q(a | posteriors[k])`
    pub choice: Vec<Vec<f64>>,
}

impl PosteriorPolicy {
    /// Policy where posterior `k` chooses `alternatives[k]` for sure.
    pub fn degenerate(
        posteriors: Vec<Belief>,
        weights: Vec<f64>,
        alternatives: &[usize],
        num_alternatives: usize,
    ) -> Self {
        let choice = alternatives
            .iter()
            .map(|a| {
                let mut row = vec![0.0; num_alternatives];
                row[*a] = 1.0;
                row
            })
            .collect();
        PosteriorPolicy {
            posteriors,
            weights,
            choice,
        }
    }

    /// The alternative chosen at posterior `k`, if the choice there is degenerate.
    pub fn chosen(&self, k: usize) -> Option<usize> {
        let row = &self.choice[k];
        let a = row.iter().position(|p| *p == 1.0)?;
        row.iter().enumerate().all(|(b, p)| b == a || *p == 0.0).then_some(a)
    }

    /// `max_j |sum_k Q_k gamma_k(j) - mu(j)|`
    pub fn bayes_gap(&self, mu: &Belief) -> f64 {
        let mut mean = vec![0.0; mu.states()];
        for (w, p) in self.weights.iter().zip(&self.posteriors) {
            for (m, g) in mean.iter_mut().zip(p.probs()) {
                *m += w * g;
            }
        }
        crate::geometry::linf(&mean, mu.probs())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiSolution {
    pub policy: PosteriorPolicy,
    pub envelope: EnvelopeSolution,
}

pub fn solve_ri(instance: &Instance) -> Result<PosteriorPolicy> {
    solve_ri_with(instance, &ConcavifyOptions::default()).map(|s| s.policy)
}

pub fn solve_ri_with(instance: &Instance, opts: &ConcavifyOptions) -> Result<RiSolution> {
    if let Some(reason) = cheap_violation(instance) {
        return Err(Error::AssumptionViolation(reason));
    }
    solve_ri_unchecked(instance, opts)
}

/// Solves without screening for parallel net utilities. Used on population
/// draws, where that condition depends only on the covariates and is reported
/// once per covariate point.
pub fn solve_ri_unchecked(instance: &Instance, opts: &ConcavifyOptions) -> Result<RiSolution> {
    let available = instance.available();
    let evaluators: Vec<NetUtility> = available.iter().map(|a| instance.evaluator(*a)).collect();
    let refs: Vec<&dyn ConcaveEvaluator> =
        evaluators.iter().map(|e| e as &dyn ConcaveEvaluator).collect();
    let mut envelope = concavify_at_prior_with(&refs, &instance.prior, opts)?;
    for a in envelope.alternatives.iter_mut() {
        *a = available[*a];
    }
    let policy = PosteriorPolicy::degenerate(
        envelope.posteriors.clone(),
        envelope.weights.clone(),
        &envelope.alternatives,
        instance.num_alternatives(),
    );
    Ok(RiSolution { policy, envelope })
}

pub fn policy_value(instance: &Instance, policy: &PosteriorPolicy) -> Result<f64> {
    let gap = policy.bayes_gap(&instance.prior);
    let mass: f64 = policy.weights.iter().sum();
    if gap > POLICY_FEASIBILITY_TOL || (mass - 1.0).abs() > POLICY_FEASIBILITY_TOL {
        return Err(Error::InfeasiblePolicy {
            gap: gap.max((mass - 1.0).abs()),
        });
    }
    let mut total = 0.0;
    for ((w, p), q) in policy.weights.iter().zip(&policy.posteriors).zip(&policy.choice) {
        for (a, qa) in q.iter().enumerate() {
            if *w * qa != 0.0 {
                total += w * qa * net_utility(instance, a, p);
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// (ii) some alternative has a finite disturbance.
    pub finite_disturbance: bool,
    /// (iii) the posteriors supported at the solved direction are affinely independent.
    /// `None` when the problem could not be solved for another reason.
    pub rank_condition: Option<bool>,
    /// (iv) no two available alternatives differ by a state-constant utility shift.
    pub distinct_slopes: bool,
    pub notes: Vec<String>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.finite_disturbance && self.rank_condition == Some(true) && self.distinct_slopes
    }
}

/// Pairs of available alternatives whose utility difference is constant across states.
pub fn parallel_pairs(instance: &Instance) -> Vec<(usize, usize)> {
    let available = instance.available();
    let scale = instance
        .utility
        .iter()
        .flatten()
        .fold(1.0f64, |s, u| s.max(u.abs()));
    let mut out = Vec::new();
    for (i, a) in available.iter().enumerate() {
        for b in &available[i + 1..] {
            let diff: Vec<f64> = instance.utility[*a]
                .iter()
                .zip(&instance.utility[*b])
                .map(|(x, y)| x - y)
                .collect();
            let lo = diff.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo <= 1e-12 * scale && instance.num_states() > 1 {
                out.push((*a, *b));
            }
        }
    }
    out
}

fn cheap_violation(instance: &Instance) -> Option<String> {
    if instance.available().is_empty() {
        return Some("(ii) every disturbance is -inf".into());
    }
    parallel_pairs(instance)
        .first()
        .map(|(a, b)| format!("(iv) alternatives {a} and {b} have parallel net utilities"))
}

pub fn verify_assumptions(instance: &Instance) -> AssumptionReport {
    let mut notes = Vec::new();
    let finite_disturbance = !instance.available().is_empty();
    if !finite_disturbance {
        notes.push("every disturbance is -inf".into());
    }
    let pairs = parallel_pairs(instance);
    for (a, b) in &pairs {
        notes.push(format!("alternatives {a} and {b} differ by a state-constant shift"));
    }
    let distinct_slopes = pairs.is_empty();
    let rank_condition = if !finite_disturbance {
        None
    } else {
        match rank_at_solution(instance) {
            Ok(ok) => Some(ok),
            Err(Error::DegenerateSupport(m)) => {
                notes.push(m);
                Some(false)
            }
            Err(e) => {
                notes.push(format!("rank check skipped: {e}"));
                None
            }
        }
    };
    AssumptionReport {
        finite_disturbance,
        rank_condition,
        distinct_slopes,
        notes,
    }
}

fn rank_at_solution(instance: &Instance) -> Result<bool> {
    let available = instance.available();
    let evaluators: Vec<NetUtility> = available.iter().map(|a| instance.evaluator(*a)).collect();
    let refs: Vec<&dyn ConcaveEvaluator> =
        evaluators.iter().map(|e| e as &dyn ConcaveEvaluator).collect();
    let envelope = concavify_at_prior_with(&refs, &instance.prior, &ConcavifyOptions::default())?;
    let support = support_function(&refs, &envelope.optimal_direction)?;
    let points: Vec<&Belief> = support.supported_posteriors.iter().map(|s| &s.posterior).collect();
    Ok(affinely_independent(&points))
}

pub(crate) fn affinely_independent(points: &[&Belief]) -> bool {
    if points.is_empty() {
        return false;
    }
    let j = points[0].states();
    if points.len() > j {
        return false;
    }
    let m = DMatrix::from_fn(j, points.len(), |r, c| points[c].probs()[r]);
    let sv = m.singular_values();
    let smax = sv.max();
    sv.iter().all(|s| *s > 1e-9 * smax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn example_one() -> Instance {
        let mu = Belief::uniform(2);
        Instance::from_parts(
            mu,
            vec![vec![10.0, 5.0], vec![12.0, 3.0]],
            vec![1.0, 2.0],
            CostFamily::Quadratic,
            2.0,
        )
        .unwrap()
    }

    fn b(p: f64) -> Belief {
        Belief::new(vec![p, 1.0 - p]).unwrap()
    }

    #[test]
    fn net_utility_values() {
        let inst = example_one();
        assert_abs_diff_eq!(net_utility(&inst, 0, &b(1.0)), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(net_utility(&inst, 1, &b(0.5)), 9.5, epsilon = 1e-12);
        assert_eq!(objective_upper_envelope(&inst, &b(0.5)), (9.5, 1));
        assert_eq!(objective_upper_envelope(&inst, &b(0.0)), (5.0, 0));
    }

    #[test]
    fn cost_is_zero_at_center() {
        let mu = Belief::new(vec![0.2, 0.3, 0.5]).unwrap();
        for family in [CostFamily::Quadratic, CostFamily::KlToPrior, CostFamily::Tsallis] {
            let c = AttentionCost::new(family, 1.7, mu.clone()).unwrap();
            assert_eq!(c.value(mu.probs()), 0.0);
        }
    }

    #[test]
    fn closed_forms_match_numeric_search() {
        let mu = Belief::new(vec![0.2, 0.3, 0.5]).unwrap();
        let v = [1.3, -0.4, 0.9];
        for family in [CostFamily::Quadratic, CostFamily::KlToPrior, CostFamily::Tsallis] {
            let c = AttentionCost::new(family, 0.6, mu.clone()).unwrap();
            let closed = c.tilted_argmax(&v);
            let phi = |g: &[f64]| dot(g, &v) - c.value(g);
            let grid = crate::geometry::simplex_grid(3, 0.002).unwrap();
            let best = grid
                .iter()
                .map(|g| phi(g.probs()))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(phi(&closed) >= best - 1e-9, "{family:?}");
        }
    }

    #[test]
    fn example_one_policy() {
        let inst = example_one();
        let sol = solve_ri_with(&inst, &ConcavifyOptions::default()).unwrap();
        assert_eq!(sol.policy.posteriors, vec![Belief::uniform(2)]);
        assert_eq!(sol.policy.chosen(0), Some(1));
        assert_abs_diff_eq!(policy_value(&inst, &sol.policy).unwrap(), 9.5, epsilon = 1e-12);
    }

    #[test]
    fn forced_two_point_policy() {
        let inst = example_one();
        let p = PosteriorPolicy::degenerate(vec![b(0.0), b(1.0)], vec![0.5, 0.5], &[0, 1], 2);
        // N^a(0) = 5, N^b(1) = 13.
        assert_abs_diff_eq!(policy_value(&inst, &p).unwrap(), 9.0, epsilon = 1e-12);
        let bad = PosteriorPolicy::degenerate(vec![b(0.0), b(1.0)], vec![0.3, 0.7], &[0, 1], 2);
        assert!(matches!(policy_value(&inst, &bad), Err(Error::InfeasiblePolicy { .. })));
    }

    #[test]
    fn assumption_report() {
        assert!(verify_assumptions(&example_one()).all_pass());
        let mut dup = example_one();
        dup.utility[1] = dup.utility[0].clone();
        let r = verify_assumptions(&dup);
        assert!(!r.distinct_slopes);
        assert!(matches!(solve_ri(&dup), Err(Error::AssumptionViolation(_))));
        let mut dead = example_one();
        dead.disturbance = vec![f64::NEG_INFINITY; 2];
        assert!(!verify_assumptions(&dead).finite_disturbance);
    }

    #[test]
    fn unaffordable_learning_picks_prior_best() {
        let mu = Belief::uniform(2);
        let inst = Instance::from_parts(
            mu.clone(),
            vec![vec![10.0, 5.0], vec![12.0, 3.0]],
            vec![1.0, 2.0],
            CostFamily::Quadratic,
            1e6,
        )
        .unwrap();
        let p = solve_ri(&inst).unwrap();
        assert_eq!(p.posteriors, vec![mu]);
        assert_eq!(p.chosen(0), Some(1));
    }

    #[test]
    fn unavailable_alternative_is_dropped() {
        let mut inst = example_one();
        inst.disturbance[1] = f64::NEG_INFINITY;
        let p = solve_ri(&inst).unwrap();
        assert_eq!(p.chosen(0), Some(0));
        assert_abs_diff_eq!(policy_value(&inst, &p).unwrap(), 8.5, epsilon = 1e-12);
    }
}

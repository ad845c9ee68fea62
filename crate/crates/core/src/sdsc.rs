//! State-dependent stochastic choice: generation from a posterior policy,
//! revealed objects, the direct program over choice matrices, and the
//! cross-check between the two solution routes.

use crate::error::{Error, Result};
use crate::geometry::{linf, project_to_simplex, Belief, ConcaveEvaluator};
use crate::ri::{policy_value, solve_ri, AttentionCost, CostFamily, Instance, PosteriorPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;
use std::io::{Read, Write};

/// Revealed posteriors closer than this (sup norm) share one attention atom.
pub const MERGE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SdscFunction {
    /// `cond[a][j] = P(a | omega_j)`
    pub cond: Vec<Vec<f64>>,
    /// `marginal[a] = P(a)`
    pub marginal: Vec<f64>,
}

impl SdscFunction {
    /// Validates column stochasticity and fills in the marginals under `mu`.
    pub fn new(cond: Vec<Vec<f64>>, mu: &Belief) -> Result<Self> {
        let j = mu.states();
        if cond.is_empty() || cond.iter().any(|row| row.len() != j) {
            return Err(Error::InvalidInput(format!("choice matrix must be K x {j}")));
        }
        if cond.iter().flatten().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + 1e-12) {
            return Err(Error::InvalidInput("choice probabilities outside [0, 1]".into()));
        }
        for s in 0..j {
            let total: f64 = cond.iter().map(|row| row[s]).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "choice probabilities in state {s} sum to {total}"
                )));
            }
        }
        let marginal = cond
            .iter()
            .map(|row| row.iter().zip(mu.probs()).map(|(p, m)| p * m).sum())
            .collect();
        Ok(SdscFunction { cond, marginal })
    }

    pub fn num_alternatives(&self) -> usize {
        self.cond.len()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.cond.len()).filter(|a| self.marginal[*a] > 0.0).collect()
    }

    pub fn max_abs_diff(&self, other: &SdscFunction) -> f64 {
        self.cond
            .iter()
            .zip(&other.cond)
            .map(|(a, b)| linf(a, b))
            .fold(0.0, f64::max)
    }
}

/// `P(a | omega) = mu(omega)^{-1} sum_gamma Q(gamma) q(a | gamma) gamma(omega)`
pub fn generate_sdsc(policy: &PosteriorPolicy, mu: &Belief) -> Result<SdscFunction> {
    if let Some(state) = mu.probs().iter().position(|p| *p <= 0.0) {
        return Err(Error::ZeroPriorState { state });
    }
    let k = policy.choice.first().map_or(0, Vec::len);
    let j = mu.states();
    let mut cond = vec![vec![0.0; j]; k];
    for ((w, p), q) in policy.weights.iter().zip(&policy.posteriors).zip(&policy.choice) {
        for (a, qa) in q.iter().enumerate() {
            for s in 0..j {
                cond[a][s] += w * qa * p.probs()[s];
            }
        }
    }
    for row in cond.iter_mut() {
        for (s, c) in row.iter_mut().enumerate() {
            *c = (*c / mu.probs()[s]).clamp(0.0, 1.0);
        }
    }
    SdscFunction::new(cond, mu)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RevealedAtom {
    pub posterior: Belief,
    /// `Q(gamma)`
    pub mass: f64,
    /// `q(a | gamma)` over all alternatives.
    pub choice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RevealedObjects {
    /// Revealed posterior per alternative, `None` outside the support.
    pub posteriors: Vec<Option<Belief>>,
    pub atoms: Vec<RevealedAtom>,
}

impl RevealedObjects {
    pub fn to_policy(&self) -> PosteriorPolicy {
        PosteriorPolicy {
            posteriors: self.atoms.iter().map(|a| a.posterior.clone()).collect(),
            weights: self.atoms.iter().map(|a| a.mass).collect(),
            choice: self.atoms.iter().map(|a| a.choice.clone()).collect(),
        }
    }

    /// `max_j |sum_a P(a) gamma^a(j) - mu(j)|`
    pub fn bayes_gap(&self, rho: &SdscFunction, mu: &Belief) -> f64 {
        let mut mean = vec![0.0; mu.states()];
        for (a, p) in self.posteriors.iter().enumerate() {
            if let Some(p) = p {
                for (m, g) in mean.iter_mut().zip(p.probs()) {
                    *m += rho.marginal[a] * g;
                }
            }
        }
        linf(&mean, mu.probs())
    }
}

pub fn revealed_objects(rho: &SdscFunction, mu: &Belief) -> Result<RevealedObjects> {
    let k = rho.num_alternatives();
    let mut posteriors = vec![None; k];
    let mut atoms: Vec<RevealedAtom> = Vec::new();
    for a in rho.support() {
        let masses: Vec<f64> = rho.cond[a]
            .iter()
            .zip(mu.probs())
            .map(|(p, m)| p * m / rho.marginal[a])
            .collect();
        let post = Belief::from_masses(masses)?;
        match atoms
            .iter_mut()
            .find(|atom| atom.posterior.linf_distance(&post) <= MERGE_TOL)
        {
            Some(atom) => {
                atom.mass += rho.marginal[a];
                atom.choice[a] += rho.marginal[a];
            }
            None => {
                let mut choice = vec![0.0; k];
                choice[a] = rho.marginal[a];
                atoms.push(RevealedAtom {
                    posterior: post.clone(),
                    mass: rho.marginal[a],
                    choice,
                });
            }
        }
        posteriors[a] = Some(post);
    }
    for atom in atoms.iter_mut() {
        for c in atom.choice.iter_mut() {
            *c /= atom.mass;
        }
    }
    Ok(RevealedObjects { posteriors, atoms })
}

/// `sum_a P(a) N^a(f(P; a))`, summing only over chosen alternatives.
pub fn sdsc_objective(instance: &Instance, rho: &SdscFunction) -> f64 {
    let mu = instance.prior.probs();
    let mut total = 0.0;
    for a in rho.support() {
        let gamma: Vec<f64> = rho.cond[a]
            .iter()
            .zip(mu)
            .map(|(p, m)| p * m / rho.marginal[a])
            .collect();
        total += rho.marginal[a] * instance.evaluator(a).value(&gamma);
    }
    total
}

#[derive(Clone, Debug)]
pub struct SdscOptions {
    pub random_starts: usize,
    /// Add a start at the posterior solution of a slightly perturbed instance.
    pub warm_start: bool,
    pub perturbation: f64,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for SdscOptions {
    fn default() -> Self {
        SdscOptions {
            random_starts: 16,
            warm_start: true,
            perturbation: 1e-3,
            seed: 0x5d5c,
            max_iters: 20_000,
        }
    }
}

/// The choice-matrix program. Variables are `x[a * J + s] = P(a | omega_s)`
/// for the available alternatives; unavailable ones are pinned at zero.
struct Program<'a> {
    instance: &'a Instance,
    rows: Vec<usize>,
    states: usize,
}

impl Program<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let mu = self.instance.prior.probs();
        let j = self.states;
        let mut total = 0.0;
        let mut gamma = vec![0.0; j];
        for (r, a) in self.rows.iter().enumerate() {
            let row = &x[r * j..(r + 1) * j];
            let t: f64 = row.iter().zip(mu).map(|(p, m)| p * m).sum();
            if t <= 0.0 {
                continue;
            }
            for s in 0..j {
                gamma[s] = row[s] * mu[s] / t;
            }
            total += t * self.instance.evaluator(*a).value(&gamma);
        }
        total
    }

    /// Gradient of the perspective `t N^a(y / t)` in `y = P mu`, chained to `P`.
    /// At `t = 0` the supergradient taken at `gamma = mu` is used.
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let inst = self.instance;
        let mu = inst.prior.probs();
        let j = self.states;
        let mut gamma = vec![0.0; j];
        let mut grad_t = vec![0.0; j];
        for (r, a) in self.rows.iter().enumerate() {
            let row = &x[r * j..(r + 1) * j];
            let t: f64 = row.iter().zip(mu).map(|(p, m)| p * m).sum();
            if t > 0.0 {
                for s in 0..j {
                    gamma[s] = row[s] * mu[s] / t;
                }
            } else {
                gamma.copy_from_slice(mu);
            }
            cost_gradient_clamped(&inst.cost, &gamma, &mut grad_t);
            let tv = inst.cost.value(&gamma);
            let inner: f64 = gamma.iter().zip(&grad_t).map(|(g, d)| g * d).sum();
            for s in 0..j {
                let dy = inst.utility[*a][s] + inst.disturbance[*a] - tv - grad_t[s] + inner;
                out[r * j + s] = mu[s] * dy;
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        let j = self.states;
        let k = self.rows.len();
        let mut col = vec![0.0; k];
        for s in 0..j {
            for r in 0..k {
                col[r] = x[r * j + s];
            }
            project_to_simplex(&mut col);
            for r in 0..k {
                x[r * j + s] = col[r];
            }
        }
    }

    /// Accelerated projected gradient ascent with backtracking and adaptive restart.
    fn ascend(&self, start: Vec<f64>, max_iters: usize) -> (Vec<f64>, f64) {
        let n = start.len();
        let mut x = start;
        self.project(&mut x);
        let mut fx = self.value(&x);
        let mut y = x.clone();
        let mut fy = fx;
        let mut t = 1.0f64;
        let mut lip = 1.0f64;
        let mut g = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut quiet = 0;
        for _ in 0..max_iters {
            self.gradient(&y, &mut g);
            let fz = loop {
                for i in 0..n {
                    z[i] = y[i] + g[i] / lip;
                }
                self.project(&mut z);
                let fz = self.value(&z);
                let (mut lin, mut sq) = (0.0, 0.0);
                for i in 0..n {
                    let d = z[i] - y[i];
                    lin += g[i] * d;
                    sq += d * d;
                }
                let slack = 1e-15 * (1.0 + fy.abs());
                if fz >= fy + lin - 0.5 * lip * sq - slack || lip > 1e18 {
                    break fz;
                }
                lip *= 2.0;
            };
            if fz < fx && t > 1.0 {
                // Momentum overshot: restart from the last iterate.
                t = 1.0;
                y.copy_from_slice(&x);
                fy = fx;
                continue;
            }
            let step = linf(&z, &x);
            let gain = fz - fx;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..n {
                y[i] = z[i] + beta * (z[i] - x[i]);
            }
            self.project(&mut y);
            fy = self.value(&y);
            if fz >= fx {
                x.copy_from_slice(&z);
                fx = fz;
            }
            t = t_next;
            lip *= 0.9;
            if step < 1e-13 && gain.abs() <= 1e-15 * (1.0 + fx.abs()) {
                quiet += 1;
                if quiet >= 5 {
                    break;
                }
            } else {
                quiet = 0;
            }
        }
        (x, fx)
    }
}

fn cost_gradient_clamped(cost: &AttentionCost, gamma: &[f64], out: &mut [f64]) {
    if cost.family == CostFamily::KlToPrior {
        let mu = cost.center.probs();
        for s in 0..gamma.len() {
            out[s] = cost.scale * ((gamma[s] / mu[s]).max(1e-300).ln() + 1.0);
        }
    } else {
        cost.gradient(gamma, out);
    }
}

pub fn solve_sdsc_direct(instance: &Instance) -> Result<SdscFunction> {
    solve_sdsc_direct_with(instance, &SdscOptions::default())
}

/// Maximizes the choice-matrix objective by multi-start accelerated ascent.
/// Best value wins; ties go to the lowest start index.
pub fn solve_sdsc_direct_with(instance: &Instance, opts: &SdscOptions) -> Result<SdscFunction> {
    let mu = &instance.prior;
    if let Some(state) = mu.probs().iter().position(|p| *p <= 0.0) {
        return Err(Error::ZeroPriorState { state });
    }
    let rows = instance.available();
    if rows.is_empty() {
        return Err(Error::NonFinite);
    }
    let j = instance.num_states();
    let program = Program {
        instance,
        rows: rows.clone(),
        states: j,
    };
    let n = rows.len() * j;

    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(opts.random_starts + 1);
    for i in 0..opts.random_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let mut x = vec![0.0; n];
        for s in 0..j {
            let draws: Vec<f64> = (0..rows.len()).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = draws.iter().sum();
            for (r, d) in draws.iter().enumerate() {
                x[r * j + s] = d / total;
            }
        }
        starts.push(x);
    }
    if opts.warm_start {
        if let Some(x) = perturbed_start(instance, &rows, opts) {
            starts.push(x);
        }
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let (x, v) = program.ascend(start, opts.max_iters);
        if v.is_finite() && best.as_ref().is_none_or(|(_, bv)| v > *bv) {
            best = Some((x, v));
        }
    }
    let (mut x, mut value) =
        best.ok_or_else(|| Error::NoConvergence("no start reached a finite value".into()))?;

    // Alternatives left with negligible mass are pruned and the rest re-solved.
    let marginal = |x: &[f64], r: usize| -> f64 {
        (0..j).map(|s| x[r * j + s] * mu.probs()[s]).sum()
    };
    let keep: Vec<usize> = (0..rows.len()).filter(|r| marginal(&x, *r) > 1e-6).collect();
    if !keep.is_empty() && keep.len() < rows.len() {
        let pruned = Program {
            instance,
            rows: keep.iter().map(|r| rows[*r]).collect(),
            states: j,
        };
        let start: Vec<f64> = keep
            .iter()
            .flat_map(|r| x[r * j..(r + 1) * j].iter().copied())
            .collect();
        let (px, pv) = pruned.ascend(start, opts.max_iters);
        if pv >= value - 1e-12 * (1.0 + value.abs()) {
            let mut full = vec![0.0; n];
            for (i, r) in keep.iter().enumerate() {
                full[r * j..(r + 1) * j].copy_from_slice(&px[i * j..(i + 1) * j]);
            }
            x = full;
            value = pv;
        }
    }
    if !value.is_finite() {
        return Err(Error::NoConvergence("direct program diverged".into()));
    }

    let mut cond = vec![vec![0.0; j]; instance.num_alternatives()];
    for (r, a) in rows.iter().enumerate() {
        cond[*a].copy_from_slice(&x[r * j..(r + 1) * j]);
    }
    SdscFunction::new(cond, mu)
}

fn perturbed_start(instance: &Instance, rows: &[usize], opts: &SdscOptions) -> Option<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa5a5);
    let mut shaken = instance.clone();
    for u in shaken.utility.iter_mut().flatten() {
        *u += opts.perturbation * rng.random_range(-1.0..1.0);
    }
    let policy = solve_ri(&shaken).ok()?;
    let rho = generate_sdsc(&policy, &instance.prior).ok()?;
    Some(rows.iter().flat_map(|a| rho.cond[*a].iter().copied()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub assumptions_hold: bool,
    /// Value of the posterior policy.
    pub ri_value: Option<f64>,
    /// Choice-matrix objective at the matrix generated by the posterior policy.
    pub generated_value: Option<f64>,
    /// Choice-matrix objective at the direct optimum.
    pub direct_value: Option<f64>,
    /// Policy value of the objects revealed by the direct optimum.
    pub revealed_value: Option<f64>,
    pub max_value_gap: f64,
    /// Elementwise sup distance between the generated and direct matrices.
    pub matrix_distance: f64,
    pub pass: bool,
    pub notes: Vec<String>,
}

/// Solves both programs and compares them. Values must agree within `tol`
/// and the matrices within `10 * tol`.
pub fn check_equivalence(instance: &Instance, tol: f64) -> EquivalenceReport {
    check_equivalence_with(instance, tol, &SdscOptions::default())
}

pub fn check_equivalence_with(instance: &Instance, tol: f64, opts: &SdscOptions) -> EquivalenceReport {
    let mut report = EquivalenceReport {
        assumptions_hold: true,
        ri_value: None,
        generated_value: None,
        direct_value: None,
        revealed_value: None,
        max_value_gap: f64::INFINITY,
        matrix_distance: f64::INFINITY,
        pass: false,
        notes: Vec::new(),
    };
    let pairs = crate::ri::parallel_pairs(instance);
    if instance.available().is_empty() || !pairs.is_empty() {
        report.assumptions_hold = false;
        report
            .notes
            .push("assumption check failed; equivalence not asserted".into());
        return report;
    }
    let mu = &instance.prior;
    let outcome = (|| -> Result<()> {
        let policy = solve_ri(instance)?;
        report.ri_value = Some(policy_value(instance, &policy)?);
        let generated = generate_sdsc(&policy, mu)?;
        report.generated_value = Some(sdsc_objective(instance, &generated));
        let direct = solve_sdsc_direct_with(instance, opts)?;
        report.direct_value = Some(sdsc_objective(instance, &direct));
        let revealed = revealed_objects(&direct, mu)?;
        report.revealed_value = Some(policy_value(instance, &revealed.to_policy())?);
        report.matrix_distance = generated.max_abs_diff(&direct);
        Ok(())
    })();
    if let Err(e) = outcome {
        if matches!(e, Error::DegenerateSupport(_) | Error::AssumptionViolation(_)) {
            report.assumptions_hold = false;
        }
        report.notes.push(e.to_string());
        return report;
    }
    let values = [
        report.ri_value,
        report.generated_value,
        report.direct_value,
        report.revealed_value,
    ]
    .map(|v| v.unwrap_or(f64::NAN));
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    report.max_value_gap = hi - lo;
    report.pass = report.max_value_gap <= tol && report.matrix_distance <= 10.0 * tol;
    report
}

#[derive(Clone, Debug, PartialEq, serde::Deserialize, Serialize)]
pub struct InstanceSuite {
    pub instances: usize,
    pub states: usize,
    pub max_alternatives: usize,
    pub family: CostFamily,
    pub scale_min: f64,
    pub scale_max: f64,
    pub utility_max: f64,
    pub gumbel_scale: f64,
    pub seed: u64,
}

impl InstanceSuite {
    /// Instance `index`: between 2 and `max_alternatives` alternatives,
    /// utilities uniform on `[0, utility_max]`, Gumbel disturbances, cost scale
    /// uniform on `[scale_min, scale_max]`, prior from a flat Dirichlet kept
    /// away from the boundary.
    pub fn instance(&self, index: u64) -> Result<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let k = rng.random_range(2..=self.max_alternatives.max(2));
        let j = self.states;
        let dir: Vec<f64> = (0..j).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = dir.iter().sum();
        let prior = Belief::from_masses(
            dir.iter().map(|d| 0.8 * d / total + 0.2 / j as f64).collect(),
        )?;
        let utility = (0..k)
            .map(|_| (0..j).map(|_| rng.random_range(0.0..self.utility_max)).collect())
            .collect();
        let gumbel = rand_distr::Gumbel::new(0.0, self.gumbel_scale)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let disturbance = (0..k).map(|_| rng.sample(gumbel)).collect();
        let scale = rng.random_range(self.scale_min..=self.scale_max);
        Instance::from_parts(prior, utility, disturbance, self.family, scale)
    }
}

/// Writes `alternative,state,prob_cond,prob_marginal`, rows ordered by
/// alternative then state, 17 significant digits.
pub fn write_sdsc_csv<W: Write>(
    rho: &SdscFunction,
    alternatives: &[String],
    states: &[String],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["alternative", "state", "prob_cond", "prob_marginal"])
        .map_err(io)?;
    for (a, row) in rho.cond.iter().enumerate() {
        for (s, p) in row.iter().enumerate() {
            w.write_record([
                alternatives[a].as_str(),
                states[s].as_str(),
                &format!("{p:.16e}"),
                &format!("{:.16e}", rho.marginal[a]),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(serde::Deserialize)]
struct SdscRow {
    alternative: String,
    state: String,
    prob_cond: f64,
}

/// Reads a matrix written by [`write_sdsc_csv`], ordering rows by the given labels.
pub fn read_sdsc_csv<R: Read>(
    input: R,
    alternatives: &[String],
    states: &[String],
    mu: &Belief,
) -> Result<SdscFunction> {
    let mut cond = vec![vec![f64::NAN; states.len()]; alternatives.len()];
    let mut reader = csv::Reader::from_reader(input);
    for row in reader.deserialize::<SdscRow>() {
        let row = row.map_err(|e| Error::Io(e.to_string()))?;
        let a = alternatives
            .iter()
            .position(|x| *x == row.alternative)
            .ok_or_else(|| Error::InvalidInput(format!("unknown alternative {}", row.alternative)))?;
        let s = states
            .iter()
            .position(|x| *x == row.state)
            .ok_or_else(|| Error::InvalidInput(format!("unknown state {}", row.state)))?;
        cond[a][s] = row.prob_cond;
    }
    if cond.iter().flatten().any(|p| p.is_nan()) {
        return Err(Error::InvalidInput("choice matrix file is missing cells".into()));
    }
    SdscFunction::new(cond, mu)
}

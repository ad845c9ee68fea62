//! Command-line front end. Every command writes its files into `--out` along
//! with `manifest.json`, which records the resolved seed, timestamps and the
//! SHA-256 digest of every emitted file. The manifest is written even when the
//! command fails.
//!
//! Exit codes: 0 ok, 2 configuration, 3 numerical failure, 4 invariant
//! failure, 5 identification precondition failure.

use crate::error::Error;
use crate::geometry::ConcavifyOptions;
use crate::identification::{
    self, cell, Cell, Estimate, IdentifyConfig, Normalization, NormalizationConfig,
};
use crate::population::{
    sample_draw, ConditionalMeanTable, CovariatePoint, Regime, Scenario, Simulator,
};
use crate::ri::{solve_ri_unchecked, verify_assumptions, Instance, PosteriorPolicy};
use crate::sdsc::{check_equivalence, generate_sdsc, revealed_objects};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;
pub const EXIT_IDENTIFICATION: i32 = 5;

/// Environment variable overriding the scenario's master seed.
pub const SEED_VAR: &str = "RI_SEED";

#[derive(Parser, Debug)]
#[command(name = "inattention", version, about = "Rational inattention solver, simulator and identification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve one decision problem of a scenario.
    Solve(SolveArgs),
    /// Check that the attention, generated and direct stochastic choice solutions agree.
    Equivalence(EquivalenceArgs),
    /// Simulate conditional mean choice probabilities over the covariate grid.
    Simulate(SimulateArgs),
    /// Run the identification pipeline on a simulated means file.
    Identify(IdentifyArgs),
    /// Run the invariant suite on a scenario.
    Verify(CommonArgs),
    /// Draw the net utilities, their envelope and support lines (two states).
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    pub scenario: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 0)]
    pub draw_index: u64,
    /// Grid index of the covariate point.
    #[arg(long, default_value_t = 0)]
    pub point: usize,
}

#[derive(Args, Debug)]
pub struct EquivalenceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of instances; defaults to the scenario's suite size.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub draws: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the draw loop; output does not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    State,
    Market,
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `means.csv` written by `simulate`; `points.csv` and `manifest.json` are
    /// read from the same directory.
    pub means: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Normalization overrides such as `scale=-1`, `alternative=b`,
    /// `regressor=0`, `state=w1`, `reference=12`.
    #[arg(long = "normalize", value_name = "KEY=VALUE")]
    pub normalize: Vec<String>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 0)]
    pub draw_index: u64,
    #[arg(long, default_value_t = 0)]
    pub point: usize,
    /// Support line slopes; the optimal direction is drawn when omitted.
    #[arg(long, value_delimiter = ',')]
    pub slopes: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario: String,
    pub scenario_sha256: Option<String>,
    pub seed: Option<u64>,
    pub draws: Option<u64>,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub exit_code: i32,
    pub error: Option<String>,
    pub outputs: BTreeMap<String, String>,
}

/// A failed command: exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::Io(_)
        | Error::InvalidInput(_)
        | Error::InvalidBelief(_)
        | Error::ZeroPriorState { .. }
        | Error::VariantMismatch(_) => EXIT_CONFIG,
        Error::AssumptionViolation(_) | Error::InfeasiblePolicy { .. } => EXIT_INVARIANT,
        Error::NotPaired { .. }
        | Error::GridNotRectangular(_)
        | Error::PathLeavesSupport { .. }
        | Error::PathPointMissing(_)
        | Error::TiltUnavailable
        | Error::StepTooSmall(_) => EXIT_IDENTIFICATION,
        Error::Draw { source, .. } => match exit_code(source) {
            EXIT_CONFIG => EXIT_CONFIG,
            _ => EXIT_NUMERIC,
        },
        _ => EXIT_NUMERIC,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(command: &str, scenario: &Path, out: &Path) -> Self {
        Run {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                scenario: scenario.display().to_string(),
                scenario_sha256: None,
                seed: None,
                draws: None,
                version: env!("CARGO_PKG_VERSION").into(),
                started: chrono::Utc::now().to_rfc3339(),
                finished: String::new(),
                exit_code: EXIT_OK,
                error: None,
                outputs: BTreeMap::new(),
            },
        }
    }

    fn load(&mut self, path: &Path) -> Result<Scenario, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure {
            code: EXIT_CONFIG,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        self.manifest.scenario_sha256 = Some(sha256_hex(&bytes));
        let text = String::from_utf8(bytes).map_err(|_| Failure {
            code: EXIT_CONFIG,
            message: "scenario is not UTF-8".into(),
        })?;
        let mut sc = Scenario::from_toml_str(&text)?;
        if let Ok(v) = std::env::var(SEED_VAR) {
            let seed = v
                .parse()
                .map_err(|_| Error::config(SEED_VAR, format!("not an unsigned integer: {v:?}")))?;
            sc = sc.with_seed(seed);
        }
        self.manifest.seed = Some(sc.mc.seed);
        self.manifest.draws = Some(sc.mc.draws);
        Ok(sc)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.out).map_err(Error::from)?;
        std::fs::write(self.out.join(name), bytes).map_err(Error::from)?;
        self.manifest.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(mut self, result: Result<(), Failure>) -> i32 {
        self.manifest.finished = chrono::Utc::now().to_rfc3339();
        if let Err(f) = &result {
            self.manifest.exit_code = f.code;
            self.manifest.error = Some(f.message.clone());
            eprintln!("error: {}", f.message);
        }
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        if let Err(e) = std::fs::create_dir_all(&self.out).and_then(|_| std::fs::write(self.out.join("manifest.json"), json)) {
            eprintln!("error: cannot write manifest: {e}");
            return self.manifest.exit_code.max(EXIT_CONFIG);
        }
        self.manifest.exit_code
    }
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Solve(a) => {
            let mut run = Run::new("solve", &a.common.scenario, &a.common.out);
            let r = cmd_solve(&mut run, &a);
            run.finish(r)
        }
        Command::Equivalence(a) => {
            let mut run = Run::new("equivalence", &a.common.scenario, &a.common.out);
            let r = cmd_equivalence(&mut run, &a);
            run.finish(r)
        }
        Command::Simulate(a) => {
            let mut run = Run::new("simulate", &a.common.scenario, &a.common.out);
            let r = cmd_simulate(&mut run, &a);
            run.finish(r)
        }
        Command::Identify(a) => {
            let mut run = Run::new("identify", &a.common.scenario, &a.common.out);
            let r = cmd_identify(&mut run, &a);
            run.finish(r)
        }
        Command::Verify(a) => {
            let mut run = Run::new("verify", &a.scenario, &a.out);
            let r = cmd_verify(&mut run, &a);
            run.finish(r)
        }
        Command::Plot(a) => {
            let mut run = Run::new("plot", &a.common.scenario, &a.common.out);
            let r = cmd_plot(&mut run, &a);
            run.finish(r)
        }
    }
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::from(Error::Io(e.to_string()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Failure::from(Error::Io(e.to_string())))
}

fn grid_point(sc: &Scenario, i: usize) -> Result<&CovariatePoint, Failure> {
    sc.grid.get(i).ok_or_else(|| {
        Failure::from(Error::config("point", format!("grid has {} points", sc.grid.len())))
    })
}

fn policy_rows(sc: &Scenario, p: &PosteriorPolicy) -> Vec<Vec<String>> {
    (0..p.posteriors.len())
        .map(|k| {
            let mut row = vec![
                k.to_string(),
                f(p.weights[k]),
                p.chosen(k).map_or_else(String::new, |a| sc.alternatives[a].clone()),
            ];
            row.extend(p.posteriors[k].probs().iter().map(|v| f(*v)));
            row
        })
        .collect()
}

fn cmd_solve(run: &mut Run, a: &SolveArgs) -> Result<(), Failure> {
    let sc = run.load(&a.common.scenario)?;
    let x = grid_point(&sc, a.point)?;
    let draw = sample_draw(&sc, a.draw_index);
    let inst = sc.instance_at(x, &draw, None)?;
    let report = verify_assumptions(&inst);
    let sol = solve_ri_unchecked(&inst, &ConcavifyOptions::default())?;
    let mut header = vec!["posterior", "weight", "alternative"];
    let cols: Vec<String> = sc.states.iter().map(|s| format!("gamma_{s}")).collect();
    header.extend(cols.iter().map(String::as_str));
    run.write("policy.csv", &csv_bytes(&header, &policy_rows(&sc, &sol.policy))?)?;
    let summary = serde_json::json!({
        "draw_index": a.draw_index,
        "point": a.point,
        "value": sol.envelope.value,
        "optimal_direction": sol.envelope.optimal_direction.coords(),
        "bayes_gap": sol.policy.bayes_gap(&sc.prior),
        "assumptions": {
            "finite_disturbance": report.finite_disturbance,
            "rank_condition": report.rank_condition,
            "distinct_slopes": report.distinct_slopes,
            "notes": report.notes,
            "all_pass": report.all_pass(),
        },
    });
    run.write("solution.json", &serde_json::to_vec_pretty(&summary).expect("json"))?;
    println!("value {}", sol.envelope.value);
    for k in 0..sol.policy.posteriors.len() {
        println!(
            "posterior {:?} weight {} choice {}",
            sol.policy.posteriors[k].probs(),
            sol.policy.weights[k],
            sol.policy.chosen(k).map_or("-", |c| sc.alternatives[c].as_str())
        );
    }
    if !report.all_pass() {
        return Err(Failure {
            code: EXIT_INVARIANT,
            message: format!("assumption check failed: {}", report.notes.join("; ")),
        });
    }
    Ok(())
}

fn equivalence_instance(sc: &Scenario, i: usize) -> Result<Instance, Error> {
    match &sc.suite {
        Some(s) => s.instance(i as u64),
        None => sc.instance_at(&sc.grid[0], &sample_draw(sc, i as u64), None),
    }
}

fn cmd_equivalence(run: &mut Run, a: &EquivalenceArgs) -> Result<(), Failure> {
    let sc = run.load(&a.common.scenario)?;
    let n = a
        .instances
        .or(sc.suite.as_ref().map(|s| s.instances))
        .unwrap_or(1);
    if n == 0 {
        return Err(Error::config("instances", "must be at least 1").into());
    }
    if !(a.tol > 0.0) {
        return Err(Error::config("tol", "must be positive").into());
    }
    let opt = |v: Option<f64>| v.map_or_else(String::new, f);
    let mut rows = Vec::with_capacity(n);
    let (mut failed, mut flagged, mut worst_gap, mut worst_matrix) = (0usize, 0usize, 0.0f64, 0.0f64);
    for i in 0..n {
        let inst = equivalence_instance(&sc, i)?;
        let r = check_equivalence(&inst, a.tol);
        if !r.assumptions_hold {
            flagged += 1;
        } else if !r.pass {
            failed += 1;
        }
        if r.assumptions_hold {
            worst_gap = worst_gap.max(r.max_value_gap);
            worst_matrix = worst_matrix.max(r.matrix_distance);
        }
        rows.push(vec![
            i.to_string(),
            inst.num_alternatives().to_string(),
            inst.num_states().to_string(),
            r.assumptions_hold.to_string(),
            opt(r.ri_value),
            opt(r.generated_value),
            opt(r.direct_value),
            opt(r.revealed_value),
            f(r.max_value_gap),
            f(r.matrix_distance),
            r.pass.to_string(),
            r.notes.join("; "),
        ]);
    }
    let header = [
        "instance",
        "alternatives",
        "states",
        "assumptions_hold",
        "ri_value",
        "generated_value",
        "direct_value",
        "revealed_value",
        "max_value_gap",
        "matrix_distance",
        "pass",
        "notes",
    ];
    run.write("equivalence.csv", &csv_bytes(&header, &rows)?)?;
    let checked = n - flagged;
    let rate = if checked == 0 { 1.0 } else { (checked - failed) as f64 / checked as f64 };
    let summary = serde_json::json!({
        "instances": n,
        "assumption_failures": flagged,
        "failed": failed,
        "pass_rate": rate,
        "max_value_gap": worst_gap,
        "max_matrix_distance": worst_matrix,
        "tol": a.tol,
    });
    run.write("summary.json", &serde_json::to_vec_pretty(&summary).expect("json"))?;
    println!(
        "{} instances, {} failed, {} skipped (assumptions), pass rate {:.4}, max value gap {:.3e}, max matrix distance {:.3e}",
        n, failed, flagged, rate, worst_gap, worst_matrix
    );
    if failed > 0 {
        return Err(Failure {
            code: EXIT_INVARIANT,
            message: format!("{failed} of {checked} instances outside tolerance {:e} (max gap {worst_gap:.3e})", a.tol),
        });
    }
    Ok(())
}

fn cmd_simulate(run: &mut Run, a: &SimulateArgs) -> Result<(), Failure> {
    let mut sc = run.load(&a.common.scenario)?;
    if let Some(d) = a.draws {
        if d == 0 {
            return Err(Error::config("draws", "must be at least 1").into());
        }
        sc = sc.with_draws(d);
    }
    if let Some(s) = a.seed {
        sc = sc.with_seed(s);
    }
    run.manifest.seed = Some(sc.mc.seed);
    run.manifest.draws = Some(sc.mc.draws);
    let mut sim = Simulator::new(&sc);
    if let Some(w) = a.workers {
        sim = sim.with_workers(w);
    }
    let table = ConditionalMeanTable::simulate(&sim)?;
    let mut means = Vec::new();
    table.write_csv(&sc, &mut means)?;
    let mut points = Vec::new();
    table.write_points_csv(&sc, &mut points)?;
    run.write("means.csv", &means)?;
    run.write("points.csv", &points)?;
    let rejected: u64 = table.summaries.iter().map(|s| s.rejected).sum();
    println!(
        "{} points x {} draws (seed {}), {} redrawn",
        table.points.len(),
        sc.mc.draws,
        sc.mc.seed,
        rejected
    );
    Ok(())
}

fn normalization_config(sc: &Scenario, overrides: &[String]) -> Result<NormalizationConfig, Error> {
    let mut cfg = match &sc.identify {
        Some(c) => c.normalization.clone(),
        None => NormalizationConfig {
            alternative: sc.alternatives.last().cloned().unwrap_or_default(),
            regressor: 0,
            state: (sc.regime() == Regime::State).then(|| sc.states[0].clone()),
            sign: -1.0,
            reference: sc.grid.len() / 2,
        },
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config("normalize", format!("expected KEY=VALUE, found {o:?}")))?;
        let bad = || Error::config("normalize", format!("bad value for {k}: {v:?}"));
        match k {
            "scale" | "sign" => cfg.sign = v.parse().map_err(|_| bad())?,
            "alternative" => cfg.alternative = v.into(),
            "regressor" => cfg.regressor = v.parse().map_err(|_| bad())?,
            "state" => cfg.state = Some(v.into()),
            "reference" => cfg.reference = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::config("normalize", format!("unknown key {k:?}"))),
        }
    }
    Ok(cfg)
}

fn est_cols(e: &Estimate) -> [String; 2] {
    [f(e.value), f(e.se)]
}

fn cmd_identify(run: &mut Run, a: &IdentifyArgs) -> Result<(), Failure> {
    let sc = run.load(&a.common.scenario)?;
    let dir = a.means.parent().unwrap_or(Path::new("."));
    let manifest_path = dir.join("manifest.json");
    let config = |m: String| Failure { code: EXIT_CONFIG, message: m };
    let mbytes = std::fs::read(&manifest_path)
        .map_err(|e| config(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: RunManifest =
        serde_json::from_slice(&mbytes).map_err(|e| config(format!("bad manifest: {e}")))?;
    if manifest.command != "simulate" || manifest.exit_code != EXIT_OK {
        return Err(config("means file was not produced by a successful simulate run".into()));
    }
    if manifest.scenario_sha256 != run.manifest.scenario_sha256 {
        return Err(config("scenario digest does not match the one recorded with the means file".into()));
    }
    let means = std::fs::read(&a.means).map_err(|e| config(format!("cannot read {}: {e}", a.means.display())))?;
    let points = std::fs::read(dir.join("points.csv")).map_err(|e| config(format!("cannot read points.csv: {e}")))?;
    let name = a.means.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if manifest.outputs.get(name) != Some(&sha256_hex(&means))
        || manifest.outputs.get("points.csv") != Some(&sha256_hex(&points))
    {
        return Err(config("means file digest does not match its manifest".into()));
    }
    let mut sc = sc;
    if let Some(s) = manifest.seed {
        sc = sc.with_seed(s);
    }
    if let Some(d) = manifest.draws {
        sc = sc.with_draws(d);
    }
    run.manifest.seed = Some(sc.mc.seed);
    run.manifest.draws = Some(sc.mc.draws);
    let regime = match a.mode {
        Some(Mode::State) => Regime::State,
        Some(Mode::Market) => Regime::Market,
        None => sc.regime(),
    };
    if regime != sc.regime() {
        return Err(config(format!(
            "mode {regime:?} does not match the means file, which holds {:?} data",
            sc.regime()
        )));
    }
    let table = ConditionalMeanTable::read_csv(&sc, means.as_slice(), points.as_slice())?;
    let ncfg = normalization_config(&sc, &a.normalize)?;
    let norm = Normalization::from_config(&sc, &ncfg)?;
    let icfg = sc.identify.clone().unwrap_or(IdentifyConfig {
        normalization: ncfg,
        welfare: Vec::new(),
        bounds: Vec::new(),
        tilt_step: 1e-2,
    });
    // The file carries per-cell standard errors only. Regenerating the draws
    // from the recorded seed restores the per-draw outcomes, so derivative and
    // ratio errors reflect the common random numbers. The regenerated means
    // must reproduce the file.
    let sim = Simulator::new(&sc);
    for (x, s) in table.points.iter().zip(&table.summaries) {
        let fresh = sim.summary(x)?;
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| (u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        let cond_ok = regime == Regime::Market || s.cond.iter().zip(&fresh.cond).all(|(a, b)| same(a, b));
        if !cond_ok || !same(&s.marg, &fresh.marg) || !same(&[s.value], &[fresh.value]) {
            return Err(config(format!("means at {:?} do not match the recorded seed and draw count", x.0)));
        }
    }
    let report = identification::identify(&sim, regime, &norm, &icfg).map_err(|e| match e {
        Error::InvalidInput(m) => Failure { code: EXIT_IDENTIFICATION, message: m },
        e => e.into(),
    })?;

    let alt = |i: usize| sc.alternatives[i].clone();
    let state_name = report.state.map_or_else(String::new, |j| sc.states[j].clone());
    let rows: Vec<Vec<String>> = report
        .ratios
        .iter()
        .map(|r| {
            let mut row = vec![r.x_id.to_string(), alt(r.a), r.p.to_string(), alt(r.b), r.q.to_string(), state_name.clone()];
            row.extend(est_cols(&r.estimate.ratio));
            row.extend(est_cols(&r.estimate.numerator));
            row.extend(est_cols(&r.estimate.denominator));
            row.push(r.estimate.strictly_paired.to_string());
            row
        })
        .collect();
    let header = [
        "x_id", "alternative_a", "regressor_p", "alternative_b", "regressor_q", "state", "ratio", "ratio_se",
        "numerator", "numerator_se", "denominator", "denominator_se", "strictly_paired",
    ];
    run.write("ratios.csv", &csv_bytes(&header, &rows)?)?;

    let mut rows = Vec::new();
    for (i, pts) in report.recovered.alternatives.iter().enumerate() {
        for p in pts {
            let x = p.x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
            let mut row = vec![alt(i), state_name.clone(), x];
            row.extend(est_cols(&p.utility));
            rows.push(row);
        }
    }
    run.write("recovered.csv", &csv_bytes(&["alternative", "state", "x", "utility", "se"], &rows)?)?;

    let rows: Vec<Vec<String>> = report
        .welfare
        .iter()
        .map(|w| {
            let mut row = vec![w.from.to_string(), w.to.to_string()];
            row.extend(est_cols(&w.difference.dv));
            row.extend(est_cols(&w.difference.dd));
            row.extend(est_cols(&w.difference.dl));
            row
        })
        .collect();
    run.write(
        "welfare.csv",
        &csv_bytes(&["from", "to", "dv", "dv_se", "dd", "dd_se", "dl", "dl_se"], &rows)?,
    )?;

    let rows: Vec<Vec<String>> = report
        .bounds
        .iter()
        .map(|b| {
            let e = &b.evaluation;
            let ok = e.gap.value >= -4.0 * e.gap.se - 1e-8;
            let mut row = vec![b.query.to_string(), f(e.lhs)];
            row.extend(est_cols(&e.rhs));
            row.extend(est_cols(&e.gap));
            row.push(ok.to_string());
            row
        })
        .collect();
    run.write(
        "bounds.csv",
        &csv_bytes(&["query", "lhs", "rhs", "rhs_se", "gap", "gap_se", "satisfied"], &rows)?,
    )?;

    let mut rows = Vec::new();
    for (c, e) in report.diagnostics.roy.iter().enumerate() {
        let mut row = vec!["roy".into(), c.to_string()];
        row.extend(est_cols(e));
        rows.push(row);
    }
    if let Some(s) = &report.diagnostics.slutsky {
        rows.push(vec!["slutsky_symmetry".into(), String::new(), f(s.symmetry_residual), String::new()]);
        rows.push(vec!["slutsky_min_eigenvalue".into(), String::new(), f(s.min_eigenvalue), f(s.max_entry_se)]);
    }
    if let Some(d) = report.diagnostics.loadings_distinct {
        rows.push(vec!["loadings_distinct".into(), String::new(), (d as u8).to_string(), String::new()]);
    }
    run.write("diagnostics.csv", &csv_bytes(&["check", "coordinate", "value", "se"], &rows)?)?;

    println!(
        "{:?} data: {} ratios, {} welfare pairs, {} bounds",
        regime,
        report.ratios.len(),
        report.welfare.len(),
        report.bounds.len()
    );
    if report.diagnostics.loadings_distinct == Some(false) {
        println!("warning: state loadings coincide for some alternatives");
    }
    Ok(())
}

struct Check {
    name: String,
    pass: bool,
    measured: f64,
    tolerance: f64,
    detail: String,
}

fn cmd_verify(run: &mut Run, a: &CommonArgs) -> Result<(), Failure> {
    let sc = run.load(&a.scenario)?;
    let checks = verify_checks(&sc)?;
    let mut out = String::new();
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            let status = if c.pass { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{status} {} measured {:.3e} tolerance {:.3e} {}", c.name, c.measured, c.tolerance, c.detail);
            vec![c.name.clone(), status.into(), f(c.measured), f(c.tolerance), c.detail.clone()]
        })
        .collect();
    print!("{out}");
    run.write("verify.csv", &csv_bytes(&["check", "status", "measured", "tolerance", "detail"], &rows)?)?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_INVARIANT,
            message: format!("{failed} of {} checks failed", checks.len()),
        });
    }
    Ok(())
}

fn verify_checks(sc: &Scenario) -> Result<Vec<Check>, Failure> {
    let mut checks = Vec::new();
    let x0 = &sc.grid[0];
    let inst = sc.instance_at(x0, &sample_draw(sc, 0), None)?;
    let report = verify_assumptions(&inst);
    checks.push(Check {
        name: "assumptions".into(),
        pass: report.all_pass(),
        measured: (!report.all_pass()) as u8 as f64,
        tolerance: 0.0,
        detail: report.notes.join("; "),
    });
    if !report.all_pass() {
        return Ok(checks);
    }

    let n = sc.mc.draws.min(20);
    let (mut gap, mut trip) = (0.0f64, 0.0f64);
    for i in 0..n {
        let inst = sc.instance_at(x0, &sample_draw(sc, i), None)?;
        let sol = solve_ri_unchecked(&inst, &ConcavifyOptions::default())?;
        gap = gap.max(sol.policy.bayes_gap(&sc.prior));
        let rho = generate_sdsc(&sol.policy, &sc.prior)?;
        let back = generate_sdsc(&revealed_objects(&rho, &sc.prior)?.to_policy(), &sc.prior)?;
        trip = trip.max(rho.max_abs_diff(&back));
    }
    checks.push(Check {
        name: "bayes_plausibility".into(),
        pass: gap <= 1e-10,
        measured: gap,
        tolerance: 1e-10,
        detail: format!("{n} draws"),
    });
    checks.push(Check {
        name: "round_trip".into(),
        pass: trip <= 1e-10,
        measured: trip,
        tolerance: 1e-10,
        detail: format!("{n} draws"),
    });
    let eq = check_equivalence(&inst, 1e-6);
    checks.push(Check {
        name: "equivalence".into(),
        pass: eq.pass || !eq.assumptions_hold,
        measured: eq.max_value_gap,
        tolerance: 1e-6,
        detail: format!("matrix distance {:.3e}", eq.matrix_distance),
    });

    let deterministic = sc.is_deterministic();
    let (k_se, h) = (4.0, sc.identify.as_ref().map_or(1e-3, |c| c.tilt_step));
    let h = if deterministic { h.min(1e-5) } else { h };
    let regime = sc.regime();
    let reference = sc
        .identify
        .as_ref()
        .and_then(|c| sc.grid.get(c.normalization.reference).cloned())
        .unwrap_or_else(|| sc.grid[sc.grid.len() / 2].clone());
    let sim = Simulator::new(sc);
    let coords = match regime {
        Regime::State => sc.num_alternatives() * sc.num_states(),
        Regime::Market => sc.num_alternatives(),
    };
    let (mut worst, mut band, mut all_ok) = (0.0f64, 0.0f64, true);
    for c in 0..coords {
        let r = identification::roy_residual_at(&sim, regime, &reference, c, h)?;
        let ok = if deterministic { r.value.abs() <= 1e-4 } else { r.within(0.0, k_se, 1e-9) };
        worst = worst.max(r.value.abs());
        band = band.max(k_se * r.se + 1e-9);
        all_ok &= ok;
    }
    checks.push(Check {
        name: "roy".into(),
        pass: all_ok,
        measured: worst,
        tolerance: if deterministic { 1e-4 } else { band },
        detail: if deterministic { "absolute".into() } else { "largest 4 SE band".into() },
    });
    let sl = identification::slutsky_check_at(&sim, regime, &reference, h)?;
    let (sym_ok, eig_tol) = if deterministic {
        (sl.symmetry_residual <= 1e-4, 1e-6)
    } else {
        (sl.symmetric_within(k_se, 1e-10), k_se * sl.max_entry_se)
    };
    checks.push(Check {
        name: "slutsky_symmetry".into(),
        pass: sym_ok,
        measured: sl.symmetry_residual,
        tolerance: if deterministic {
            1e-4
        } else {
            sl.pairs.iter().map(|p| k_se * p.difference.se + 1e-10).fold(0.0, f64::max)
        },
        detail: if deterministic { "absolute".into() } else { "largest 4 SE band".into() },
    });
    checks.push(Check {
        name: "slutsky_psd".into(),
        pass: sl.min_eigenvalue >= -eig_tol,
        measured: sl.min_eigenvalue,
        tolerance: -eig_tol,
        detail: "minimum eigenvalue".into(),
    });

    if let Some(cfg) = &sc.identify {
        for [from, to] in &cfg.welfare {
            let (Some(x), Some(x1)) = (sc.grid.get(*from), sc.grid.get(*to)) else {
                return Err(Error::config("identify.welfare", "no such grid point").into());
            };
            let w = identification::welfare_difference_at(&sim, regime, x, x1)?;
            let (v0, v1) = (sim.summary(x)?, sim.summary(x1)?);
            let direct = Estimate::lin(&[(1.0, &cell(&v1, Cell::Value)), (-1.0, &cell(&v0, Cell::Value))]);
            let diff = Estimate::lin(&[(1.0, &w.dv), (-1.0, &direct)]);
            let ok = if deterministic { diff.value.abs() <= 1e-4 } else { diff.within(0.0, k_se, 1e-9) };
            checks.push(Check {
                name: format!("welfare_{from}_{to}"),
                pass: ok,
                measured: diff.value.abs(),
                tolerance: if deterministic { 1e-4 } else { k_se * diff.se },
                detail: format!("dV {:.6} direct {:.6}", w.dv.value, direct.value),
            });
        }
        for (i, b) in cfg.bounds.iter().enumerate() {
            let x0 = CovariatePoint(b.x0.clone());
            let truth = sim.summary(&x0)?;
            let path: Vec<CovariatePoint> = b
                .path
                .iter()
                .map(|id| sc.grid.get(*id).cloned().ok_or_else(|| Error::config("identify.bounds.path", "no such grid point")))
                .collect::<Result<_, _>>()?;
            let ev = match regime {
                Regime::State => identification::counterfactual_bound(
                    &sim,
                    &identification::CounterfactualQuery { x0, path, candidate: truth.cond.clone() },
                )?,
                Regime::Market => identification::market_bound(
                    &sim,
                    &identification::CounterfactualQuery { x0, path, candidate: truth.marg.clone() },
                )?,
            };
            let tol = if deterministic { 1e-8 } else { k_se * ev.gap.se + 1e-8 };
            checks.push(Check {
                name: format!("bound_{i}"),
                pass: ev.satisfied(tol),
                measured: ev.gap.value,
                tolerance: -tol,
                detail: "truth candidate".into(),
            });
        }
    }
    Ok(checks)
}

fn cmd_plot(run: &mut Run, a: &PlotArgs) -> Result<(), Failure> {
    let sc = run.load(&a.common.scenario)?;
    let x = grid_point(&sc, a.point)?;
    let inst = sc.instance_at(x, &sample_draw(&sc, a.draw_index), None)?;
    let slopes = if a.slopes.is_empty() {
        let sol = solve_ri_unchecked(&inst, &ConcavifyOptions::default())?;
        sol.envelope.optimal_direction.coords().to_vec()
    } else {
        a.slopes.clone()
    };
    let svg = crate::plot::envelope_svg(&inst, &sc.alternatives, &slopes)?;
    run.write("envelope.svg", svg.as_bytes())?;
    println!("wrote {}", run.out.join("envelope.svg").display());
    Ok(())
}

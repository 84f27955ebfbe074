//! Batch experiment driver behind the `mfg` binary.
//!
//! A run is described by a TOML config (scalar linear-quadratic model
//! family, solver parameters, evaluation points), executed as one of the
//! tasks below, and written to an output directory as `summary.json`, task
//! CSVs, and a `manifest.json` recording the config hash and seed. Runs
//! are deterministic: the same config and seed produce byte-identical
//! outputs.
//!
//! Exit codes: 0 success, 2 config error, 3 solver divergence, 4 a
//! requested check failed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MfgError, Result};
use crate::fbsde::{solve_mfg, FbsdeSolution, SolverParams, TimeGrid};
use crate::lq::{self, LqModel};
use crate::measure::ParticleMeasure;
use crate::model::{
    check_convexity, check_derivative_consistency, check_monotonicity, check_small_mf_effect,
    ModelSpec,
};
use crate::value::{
    self, dpp_check, hessian_value, lfd_value, master_residual, solve_pipeline,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Numerical experiments for degenerate mean field games.
#[derive(Debug, Parser)]
#[command(name = "mfg", version)]
pub struct Cli {
    /// Path to the TOML experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; created if absent, files are overwritten.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config's solver seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's task.
    #[arg(long, value_enum)]
    pub task: Option<Task>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Solve the equilibrium fixed point and export the population paths.
    SolveMfg,
    /// Solve the control problem against the equilibrium flow.
    SolveControl,
    /// Evaluate V(t, x, mu) with its gradient and initial q.
    Value,
    /// Jacobian, Hessian, and measure derivatives of the value.
    Derivatives,
    /// Master equation and dynamic-programming residuals on a (t, x) grid.
    CheckMaster,
    /// Run the standing-assumption validators on the model.
    CheckAssumptions,
    /// Exact Riccati solution of the linear-quadratic model.
    LqOracle,
    /// Solver-versus-oracle comparison of V, D_x V, D_x^2 V.
    Compare,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::SolveMfg => "solve-mfg",
            Task::SolveControl => "solve-control",
            Task::Value => "value",
            Task::Derivatives => "derivatives",
            Task::CheckMaster => "check-master",
            Task::CheckAssumptions => "check-assumptions",
            Task::LqOracle => "lq-oracle",
            Task::Compare => "compare",
        }
    }
}

/// Scalar (n = d = 1) linear-quadratic model section. Dynamics
/// dX = (b0 + b0_mean E[X] + b1 X + b2 v) ds + (sigma0 + sigma1 X) dW,
/// running cost f0 + f1 x + f1_mean x E[X] + big_f1 x^2 / 2 + f2 v +
/// big_f2 v^2 / 2, terminal cost g0 + g1 x + g1_mean x E[X] + big_g x^2 / 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: f64,
    pub b0: f64,
    pub b0_mean: f64,
    pub b1: f64,
    pub b2: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub f0: f64,
    pub f1: f64,
    pub f1_mean: f64,
    pub big_f1: f64,
    pub f2: f64,
    pub big_f2: f64,
    pub g0: f64,
    pub g1: f64,
    pub g1_mean: f64,
    pub big_g: f64,
    /// Homotopy scale multiplying every measure coupling.
    pub coupling_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            horizon: 1.0,
            b0: 0.0,
            b0_mean: 0.0,
            b1: 0.0,
            b2: 1.0,
            sigma0: 0.0,
            sigma1: 0.0,
            f0: 0.0,
            f1: 0.0,
            f1_mean: 0.0,
            big_f1: 1.0,
            f2: 0.0,
            big_f2: 1.0,
            g0: 0.0,
            g1: 0.0,
            g1_mean: 0.0,
            big_g: 0.0,
            coupling_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn to_lq(&self) -> LqModel {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        LqModel {
            n: 1,
            d: 1,
            horizon: self.horizon,
            b0: DVector::from_element(1, self.b0),
            b0_mean: s(self.b0_mean),
            b1: s(self.b1),
            b2: s(self.b2),
            sigma0: s(self.sigma0),
            sigma1: vec![s(self.sigma1)],
            f0: self.f0,
            f1: DVector::from_element(1, self.f1),
            f1_mean: s(self.f1_mean),
            big_f1: s(self.big_f1),
            f2: DVector::from_element(1, self.f2),
            big_f2: s(self.big_f2),
            g0: self.g0,
            g1: DVector::from_element(1, self.g1),
            g1_mean: s(self.g1_mean),
            big_g: s(self.big_g),
        }
    }

    pub fn to_spec(&self) -> Result<ModelSpec> {
        let lqm = self.to_lq();
        lqm.validate()?;
        Ok(lq::to_model_spec(&lqm)?.with_coupling_scale(self.coupling_scale))
    }
}

/// Evaluation section: where and how the task is run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Initial time of the horizon [t, T].
    pub t: f64,
    /// Primary spatial evaluation point.
    pub x: f64,
    /// Additional evaluation points (compare, lq-oracle, check-master).
    pub xs: Vec<f64>,
    /// Evaluation times for check-master.
    pub ts: Vec<f64>,
    /// Atoms of the initial population measure.
    pub mu: Vec<f64>,
    /// Dynamic-programming window for check-master.
    pub eps: f64,
    /// Probe atom indices for the measure derivative (derivatives task);
    /// empty means all atoms of mu.
    pub probes: Vec<usize>,
    /// Relative tolerance of the compare task.
    pub rel_tol: f64,
    /// Master residual bound factor: residual <= factor * (1 + |x|^2).
    pub residual_scale: f64,
    /// Monte Carlo samples of the assumption validators.
    pub samples: usize,
    /// Runge-Kutta steps of the Riccati oracle.
    pub oracle_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t: 0.0,
            x: 1.0,
            xs: vec![],
            ts: vec![],
            mu: vec![0.0],
            eps: 0.1,
            probes: vec![],
            rel_tol: 0.02,
            residual_scale: 0.05,
            samples: 200,
            oracle_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Config schema version; this build reads version 1.
    pub schema: u32,
    pub task: Option<Task>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub params: SolverParams,
    #[serde(default)]
    pub run: RunConfig,
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MfgError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: Config =
        toml::from_str(&text).map_err(|e| MfgError::Config(format!("{}: {e}", path.display())))?;
    if cfg.schema != SCHEMA_VERSION {
        return Err(MfgError::Config(format!(
            "unsupported schema version {} (this build reads {SCHEMA_VERSION})",
            cfg.schema
        )));
    }
    Ok(cfg)
}

fn exit_code(e: &MfgError) -> i32 {
    match e {
        MfgError::NewtonDivergence { .. }
        | MfgError::SingularHessian(_)
        | MfgError::PicardDivergence(_)
        | MfgError::FlowDivergence(_, _)
        | MfgError::BlowUp(_, _) => 3,
        _ => 2,
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let config_bytes = std::fs::read(&cli.config)
        .map_err(|e| MfgError::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut cfg = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.params.seed = seed;
    }
    let task = cli
        .task
        .or(cfg.task)
        .ok_or_else(|| MfgError::Config("no task: set `task` in the config or pass --task".into()))?;

    std::fs::create_dir_all(&cli.out)?;
    let outcome = dispatch(task, &cfg, &cli.out)?;

    let summary = serde_json::json!({
        "schema": SCHEMA_VERSION,
        "task": task.name(),
        "seed": cfg.params.seed,
        "passed": !outcome.failed,
        "report": outcome.report,
    });
    write_out(&cli.out, "summary.json", &pretty(&summary))?;
    let manifest = serde_json::json!({
        "schema": SCHEMA_VERSION,
        "task": task.name(),
        "seed": cfg.params.seed,
        "config_sha256": hex::encode(Sha256::digest(&config_bytes)),
    });
    write_out(&cli.out, "manifest.json", &pretty(&manifest))?;

    if outcome.failed {
        eprintln!("{}: check failed", task.name());
        Ok(4)
    } else {
        println!("{}: ok", task.name());
        Ok(0)
    }
}

struct Outcome {
    report: serde_json::Value,
    failed: bool,
}

impl Outcome {
    fn ok(report: serde_json::Value) -> Self {
        Outcome { report, failed: false }
    }
}

fn dispatch(task: Task, cfg: &Config, out: &Path) -> Result<Outcome> {
    match task {
        Task::SolveMfg => task_solve_mfg(cfg, out),
        Task::SolveControl => task_solve_control(cfg, out),
        Task::Value => task_value(cfg),
        Task::Derivatives => task_derivatives(cfg, out),
        Task::CheckMaster => task_check_master(cfg, out),
        Task::CheckAssumptions => task_check_assumptions(cfg),
        Task::LqOracle => task_lq_oracle(cfg, out),
        Task::Compare => task_compare(cfg, out),
    }
}

fn measure_from(cfg: &Config) -> Result<ParticleMeasure> {
    ParticleMeasure::from_scalars(&cfg.run.mu)
}

fn task_solve_mfg(cfg: &Config, out: &Path) -> Result<Outcome> {
    let spec = cfg.model.to_spec()?;
    let mu = measure_from(cfg)?;
    let grid = TimeGrid::new(cfg.run.t, spec.horizon, cfg.params.steps)?;
    let (pop, flow) = solve_mfg(&spec, grid, &mu, &cfg.params)?;
    write_paths_csv(out, "population.csv", &pop)?;
    let kk = grid.steps;
    let mean_t: f64 = flow.clouds[kk].mean()[0];
    Ok(Outcome::ok(serde_json::json!({
        "picard_iterations": pop.picard_iterations,
        "max_optimality_residual": pop.max_optimality_residual,
        "bsde_residual": crate::fbsde::bsde_residual(&spec, &pop, &flow),
        "terminal_mean": mean_t,
        "equilibrium_cost": value::cost_functional(&spec, &pop, &flow),
    })))
}

fn task_solve_control(cfg: &Config, out: &Path) -> Result<Outcome> {
    let spec = cfg.model.to_spec()?;
    let mu = measure_from(cfg)?;
    let x = DVector::from_element(1, cfg.run.x);
    let vs = solve_pipeline(&spec, cfg.run.t, &x, &mu, &cfg.params)?;
    write_paths_csv(out, "control.csv", &vs.ctrl)?;
    Ok(Outcome::ok(serde_json::json!({
        "value": vs.value(&spec),
        "grad": vs.grad()[0],
        "mean_q0": vs.mean_q0()[(0, 0)],
        "picard_iterations": vs.ctrl.picard_iterations,
        "max_optimality_residual": vs.ctrl.max_optimality_residual,
    })))
}

fn task_value(cfg: &Config) -> Result<Outcome> {
    let spec = cfg.model.to_spec()?;
    let mu = measure_from(cfg)?;
    let x = DVector::from_element(1, cfg.run.x);
    let vs = solve_pipeline(&spec, cfg.run.t, &x, &mu, &cfg.params)?;
    Ok(Outcome::ok(serde_json::json!({
        "t": cfg.run.t,
        "x": cfg.run.x,
        "value": vs.value(&spec),
        "grad": vs.grad()[0],
        "mean_q0": vs.mean_q0()[(0, 0)],
    })))
}

fn task_derivatives(cfg: &Config, out: &Path) -> Result<Outcome> {
    let spec = cfg.model.to_spec()?;
    let mu = measure_from(cfg)?;
    let x = DVector::from_element(1, cfg.run.x);
    let vs = solve_pipeline(&spec, cfg.run.t, &x, &mu, &cfg.params)?;
    let hess = hessian_value(&spec, &vs, &cfg.params)?;
    let probes: Vec<usize> = if cfg.run.probes.is_empty() {
        (0..mu.len()).collect()
    } else {
        for &a in &cfg.run.probes {
            if a >= mu.len() {
                return Err(MfgError::Config(format!(
                    "probe index {a} out of range for a measure with {} atoms",
                    mu.len()
                )));
            }
        }
        cfg.run.probes.clone()
    };
    let lfd = lfd_value(&spec, &vs, &probes, &cfg.params)?;
    let mut csv = String::from("probe,atom,lfd\n");
    for (a, grad) in probes.iter().zip(&lfd) {
        let _ = writeln!(csv, "{},{},{}", a, mu.point(*a)[0], grad[0]);
    }
    write_out(out, "lfd.csv", &csv)?;
    Ok(Outcome::ok(serde_json::json!({
        "value": vs.value(&spec),
        "grad": vs.grad()[0],
        "hessian": hess[(0, 0)],
        "lfd": lfd.iter().map(|g| g[0]).collect::<Vec<f64>>(),
        "probes": probes,
    })))
}

fn task_check_master(cfg: &Config, out: &Path) -> Result<Outcome> {
    let spec = cfg.model.to_spec()?;
    let mu = measure_from(cfg)?;
    let ts = if cfg.run.ts.is_empty() { vec![cfg.run.t] } else { cfg.run.ts.clone() };
    let xs = if cfg.run.xs.is_empty() { vec![cfg.run.x] } else { cfg.run.xs.clone() };
    let mut rows = Vec::new();
    let mut csv = String::from("t,x,residual,bound,dt_formula,dt_fd,dpp_gap\n");
    let mut failed = false;
    for &t in &ts {
        for &xv in &xs {
            let x = DVector::from_element(1, xv);
            let rep = master_residual(&spec, t, &x, &mu, &cfg.params)?;
            let dpp = dpp_check(&spec, t, &x, &mu, cfg.run.eps, &cfg.params)?;
            let bound = cfg.run.residual_scale * (1.0 + xv * xv);
            if rep.residual > bound || dpp.gap > 1e-2 * (1.0 + dpp.lhs.abs()) {
                failed = true;
            }
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                t, xv, rep.residual, bound, rep.dt_formula, rep.dt_fd, dpp.gap
            );
            rows.push(serde_json::json!({
                "t": t,
                "x": xv,
                "residual": rep.residual,
                "bound": bound,
                "dpp_gap": dpp.gap,
            }));
        }
    }
    write_out(out, "master.csv", &csv)?;
    Ok(Outcome { report: serde_json::Value::Array(rows), failed })
}

fn task_check_assumptions(cfg: &Config) -> Result<Outcome> {
    let spec = cfg.model.to_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.params.seed);
    let convexity = check_convexity(&spec, &mut rng, cfg.run.samples);
    let small_mf = check_small_mf_effect(&spec.constants);
    let monotonicity = check_monotonicity(&spec, &mut rng, cfg.run.samples)?;
    let derivatives = check_derivative_consistency(&spec, &mut rng, cfg.run.samples, 1e-5);
    let failed =
        !(convexity.passes && small_mf && monotonicity.passes && derivatives.passes);
    Ok(Outcome {
        report: serde_json::json!({
            "convexity": { "passes": convexity.passes, "worst_margin": convexity.worst_margin },
            "small_mean_field_effect": small_mf,
            "monotonicity": {
                "passes": monotonicity.passes,
                "worst_violation": monotonicity.worst_violation,
                "alpha": monotonicity.alpha,
            },
            "derivative_consistency": {
                "passes": derivatives.passes,
                "max_error": derivatives.max_error,
            },
        }),
        failed,
    })
}

fn lq_oracle(cfg: &Config) -> Result<(LqModel, lq::LqSolution)> {
    let lqm = cfg.model.to_lq();
    lqm.validate()?;
    let mu = measure_from(cfg)?;
    let mean0 = mu.mean();
    let m2: f64 =
        cfg.run.mu.iter().map(|a| (a - mean0[0]) * (a - mean0[0])).sum::<f64>() / cfg.run.mu.len() as f64;
    let cov0 = DMatrix::from_element(1, 1, m2);
    let sol = lq::solve_lq(&lqm, cfg.run.t, &mean0, &cov0, cfg.run.oracle_steps)?;
    Ok((lqm, sol))
}

fn task_lq_oracle(cfg: &Config, out: &Path) -> Result<Outcome> {
    let (_, sol) = lq_oracle(cfg)?;
    let mut csv = String::from("s,v2,v1,v0,mean\n");
    for (k, &s) in sol.grid.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            s,
            sol.v2[k][(0, 0)],
            sol.v1[k][0],
            sol.v0[k],
            sol.mean[k][0]
        );
    }
    write_out(out, "oracle.csv", &csv)?;
    let x = DVector::from_element(1, cfg.run.x);
    Ok(Outcome::ok(serde_json::json!({
        "t": cfg.run.t,
        "x": cfg.run.x,
        "value": sol.value(0, &x),
        "grad": sol.grad(0, &x)[0],
        "hessian": sol.hessian(0)[(0, 0)],
    })))
}

fn task_compare(cfg: &Config, out: &Path) -> Result<Outcome> {
    let spec = cfg.model.to_spec()?;
    let (_, oracle) = lq_oracle(cfg)?;
    let mu = measure_from(cfg)?;
    let xs = if cfg.run.xs.is_empty() { vec![cfg.run.x] } else { cfg.run.xs.clone() };
    let mut csv =
        String::from("x,value,oracle_value,grad,oracle_grad,hessian,oracle_hessian,worst_rel\n");
    let mut rows = Vec::new();
    let mut failed = false;
    for &xv in &xs {
        let x = DVector::from_element(1, xv);
        let vs = solve_pipeline(&spec, cfg.run.t, &x, &mu, &cfg.params)?;
        let hess = hessian_value(&spec, &vs, &cfg.params)?[(0, 0)];
        let (v, g) = (vs.value(&spec), vs.grad()[0]);
        let (ov, og, oh) = (oracle.value(0, &x), oracle.grad(0, &x)[0], oracle.hessian(0)[(0, 0)]);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        let worst = rel(v, ov).max(rel(g, og)).max(rel(hess, oh));
        if worst > cfg.run.rel_tol {
            failed = true;
        }
        let _ = writeln!(csv, "{xv},{v},{ov},{g},{og},{hess},{oh},{worst}");
        rows.push(serde_json::json!({
            "x": xv,
            "value": v, "oracle_value": ov,
            "grad": g, "oracle_grad": og,
            "hessian": hess, "oracle_hessian": oh,
            "worst_rel": worst,
        }));
    }
    write_out(out, "compare.csv", &csv)?;
    Ok(Outcome { report: serde_json::Value::Array(rows), failed })
}

fn write_paths_csv(out: &Path, name: &str, sol: &FbsdeSolution) -> Result<()> {
    let mut csv = String::from("k,s,i,x,p,v\n");
    for k in 0..=sol.grid.steps {
        let s = sol.grid.time(k);
        for i in 0..sol.particles() {
            let v = if k < sol.grid.steps { sol.v[k][i][0].to_string() } else { String::new() };
            let _ = writeln!(csv, "{},{},{},{},{},{}", k, s, i, sol.x[k][i][0], sol.p[k][i][0], v);
        }
    }
    write_out(out, name, &csv)
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn write_out(out: &Path, name: &str, content: &str) -> Result<()> {
    std::fs::write(out.join(name), content)?;
    Ok(())
}

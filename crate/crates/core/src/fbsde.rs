//! Least-squares Monte Carlo solvers for the control and equilibrium
//! forward-backward systems.
//!
//! The controlled state follows an Euler-Maruyama discretization of
//!
//! ```text
//! dY = b(s, Y, m_s, v) ds + sigma(s, Y, m_s, v) dB
//! ```
//!
//! while the costate pair (p, q) solves the backward equation with driver
//! -D_x H and terminal condition p(T) = D_x g. Conditional expectations in
//! the backward recursion are estimated by regression on a quadratic
//! polynomial basis of the state (solved in the least-squares sense by SVD,
//! which tolerates the rank-deficient bases that appear when all particles
//! share a starting point). The control is updated through the minimizer
//! of the Hamiltonian and damped Picard iteration; the noise tensor is held
//! fixed across all iterations, so each solve is a deterministic fixed
//! point computation for a given seed.
//!
//! The equilibrium (mean field) solve wraps the same inner iteration in an
//! outer fixed point on the measure flow, with damped particle blending,
//! a Wasserstein stopping rule and a continuation ladder on the coupling
//! strength as a fallback when the direct iteration diverges.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MfgError, Result};
use crate::hamiltonian;
use crate::measure::ParticleMeasure;
use crate::model::{MeasureView, ModelSpec};

/// Uniform grid on [t0, horizon] with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > t0) || steps == 0 {
            return Err(MfgError::Config(format!(
                "invalid time grid [{t0}, {horizon}] with {steps} steps"
            )));
        }
        Ok(TimeGrid { t0, horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt() * k as f64
    }
}

/// Tuning knobs of the stochastic solvers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub particles: usize,
    pub steps: usize,
    pub seed: u64,
    /// Damping weight on control updates in the inner Picard iteration.
    pub damping: f64,
    pub picard_tol: f64,
    pub picard_max: usize,
    /// Damping weight on particle blending in the outer measure iteration.
    pub flow_damping: f64,
    /// Wasserstein stopping tolerance of the outer iteration.
    pub flow_tol: f64,
    pub flow_max: usize,
    /// Cap on the subsample used for law averages in linearized flows.
    pub copy_cap: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            particles: 1000,
            steps: 25,
            seed: 1,
            damping: 0.8,
            picard_tol: 1e-6,
            picard_max: 80,
            flow_damping: 0.5,
            flow_tol: 1e-3,
            flow_max: 40,
            copy_cap: 256,
        }
    }
}

/// Brownian increments dw[k][i] in R^n over `steps` intervals of width dt,
/// reproducible from the seed alone. Particles are generated in antithetic
/// pairs (2i, 2i+1), which keeps every cross-sectional cloud symmetric and
/// sharply reduces the regression noise of the backward recursion.
pub fn brownian_increments(
    seed: u64,
    n: usize,
    particles: usize,
    steps: usize,
    dt: f64,
) -> Vec<Vec<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = dt.sqrt();
    (0..steps)
        .map(|_| {
            let mut layer: Vec<DVector<f64>> = Vec::with_capacity(particles);
            while layer.len() < particles {
                let z =
                    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
                if layer.len() + 1 < particles {
                    layer.push(z.clone());
                    layer.push(-z);
                } else {
                    layer.push(z);
                }
            }
            layer
        })
        .collect()
}

fn feature_count(n: usize) -> usize {
    1 + n + n * (n + 1) / 2
}

fn features(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut phi = DVector::zeros(feature_count(n));
    phi[0] = 1.0;
    for i in 0..n {
        phi[1 + i] = x[i];
    }
    let mut idx = 1 + n;
    for i in 0..n {
        for j in i..n {
            phi[idx] = x[i] * x[j];
            idx += 1;
        }
    }
    phi
}

/// Cross-sectional regression operator E[ . | X_k] on the quadratic basis,
/// reusable for any number of target columns.
pub struct Conditioner {
    phi: DMatrix<f64>,
    /// (phi^T phi)^+ phi^T with a rank cutoff relative to the largest
    /// eigenvalue. A coincident cloud (every particle at the same point, as
    /// at the start of a control solve) makes the basis rank deficient, and
    /// the pseudo-inverse must drop those directions rather than divide by
    /// noise-level eigenvalues.
    projector: DMatrix<f64>,
}

impl Conditioner {
    pub fn new(points: &[DVector<f64>]) -> Self {
        let rows: Vec<DVector<f64>> = points.iter().map(features).collect();
        let phi = DMatrix::from_fn(points.len(), rows[0].len(), |i, j| rows[i][j]);
        let gram = phi.transpose() * &phi;
        let eig = gram.symmetric_eigen();
        let cutoff = 1e-10 * eig.eigenvalues.amax();
        let inv = DVector::from_fn(eig.eigenvalues.len(), |i, _| {
            if eig.eigenvalues[i] > cutoff { 1.0 / eig.eigenvalues[i] } else { 0.0 }
        });
        let mut pinv = eig.eigenvectors.clone();
        for (c, mut col) in pinv.column_iter_mut().enumerate() {
            col *= inv[c];
        }
        let projector = pinv * eig.eigenvectors.transpose() * phi.transpose();
        Conditioner { phi, projector }
    }

    /// Fitted values of the least-squares projection of each target column
    /// onto the basis.
    pub fn fit(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        &self.phi * (&self.projector * targets)
    }
}

/// A discrete measure flow: one particle cloud per grid node.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    pub grid: TimeGrid,
    pub clouds: Vec<ParticleMeasure>,
    /// Unscaled moment views of the clouds.
    pub views: Vec<MeasureView>,
}

impl MeasureFlow {
    pub fn from_paths(grid: TimeGrid, paths: &[Vec<DVector<f64>>]) -> Result<Self> {
        let clouds: Result<Vec<ParticleMeasure>> =
            paths.iter().map(|atoms| ParticleMeasure::new(atoms.clone())).collect();
        let clouds = clouds?;
        let views = clouds.iter().map(MeasureView::from_measure).collect();
        Ok(MeasureFlow { grid, clouds, views })
    }

    /// Time-constant flow equal to a single measure; useful for decoupled
    /// models and as an outer-iteration seed.
    pub fn stationary(grid: TimeGrid, mu: &ParticleMeasure) -> Self {
        let clouds = vec![mu.clone(); grid.steps + 1];
        let views = clouds.iter().map(MeasureView::from_measure).collect();
        MeasureFlow { grid, clouds, views }
    }

    /// Views with the model's coupling scale applied.
    pub fn scaled_views(&self, model: &ModelSpec) -> Vec<MeasureView> {
        self.views.iter().map(|v| model.view_raw(v)).collect()
    }
}

/// Particle-wise solution of a forward-backward system: state, costate
/// pair, control and the driving noise, all on the same grid.
#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub grid: TimeGrid,
    /// x[k][i] in R^n for k = 0..=steps.
    pub x: Vec<Vec<DVector<f64>>>,
    pub p: Vec<Vec<DVector<f64>>>,
    /// q[k][i]: n-by-n, column j paired with the diffusion column j.
    pub q: Vec<Vec<DMatrix<f64>>>,
    pub v: Vec<Vec<DVector<f64>>>,
    pub dw: Vec<Vec<DVector<f64>>>,
    pub picard_iterations: usize,
    /// Worst first-order optimality residual over all nodes and particles,
    /// measured at the final polish sweep.
    pub max_optimality_residual: f64,
}

impl FbsdeSolution {
    pub fn particles(&self) -> usize {
        self.x[0].len()
    }

    /// Sample average of the initial costate, the D_x V estimator.
    pub fn mean_p0(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.p[0][0].len());
        for p in &self.p[0] {
            acc += p;
        }
        acc / self.p[0].len() as f64
    }
}

/// Inner damped-Picard LSMC solve with a frozen measure flow. `views` must
/// already carry the model's coupling scale.
fn solve_inner(
    model: &ModelSpec,
    grid: TimeGrid,
    starts: &[DVector<f64>],
    views: &[MeasureView],
    dw: &[Vec<DVector<f64>>],
    params: &SolverParams,
) -> Result<FbsdeSolution> {
    let n = model.n;
    let d = model.d;
    let kk = grid.steps;
    let nn = starts.len();
    let dt = grid.dt();
    let theta = params.damping;

    let mut v = vec![vec![DVector::zeros(d); nn]; kk + 1];
    let mut x = vec![vec![DVector::zeros(n); nn]; kk + 1];
    let mut p = vec![vec![DVector::zeros(n); nn]; kk + 1];
    let mut q = vec![vec![DMatrix::zeros(n, n); nn]; kk + 1];
    // Coefficient matrices depend only on the grid node, not the particle.
    let coefs: Vec<_> = (0..=kk).map(|k| model.step_coefs(grid.time(k), &views[k])).collect();

    for iter in 0..params.picard_max {
        // Forward sweep with the current controls.
        x[0] = starts.to_vec();
        for k in 0..kk {
            for i in 0..nn {
                let drift = coefs[k].drift(&x[k][i], &v[k][i]);
                let diff = coefs[k].diffusion(&x[k][i], &v[k][i]);
                let next = &x[k][i] + drift * dt + diff * &dw[k][i];
                if !next.iter().all(|c| c.is_finite()) {
                    return Err(MfgError::PicardDivergence(format!(
                        "state blow-up at step {k} in iteration {iter}"
                    )));
                }
                x[k + 1][i] = next;
            }
        }
        // Backward sweep: regression for the conditional expectations,
        // Hamiltonian minimization for the control update.
        for i in 0..nn {
            p[kk][i] = (model.costs.dx_g)(&x[kk][i], &views[kk]);
        }
        let mut delta: f64 = 0.0;
        for k in (0..kk).rev() {
            let cond = Conditioner::new(&x[k]);
            let targets = DMatrix::from_fn(nn, n, |i, c| p[k + 1][i][c]);
            let pbar = cond.fit(&targets);
            // Martingale increments as control variates for the q targets.
            let resid = &targets - &pbar;
            for j in 0..n {
                let qt = DMatrix::from_fn(nn, n, |i, c| resid[(i, c)] * dw[k][i][j] / dt);
                let qfit = cond.fit(&qt);
                for i in 0..nn {
                    for c in 0..n {
                        q[k][i][(c, j)] = qfit[(i, c)];
                    }
                }
            }
            for i in 0..nn {
                let pb = DVector::from_fn(n, |c, _| pbar[(i, c)]);
                let vhat =
                    hamiltonian::minimize_v_cached(model, &coefs[k], &x[k][i], &views[k], &pb, &q[k][i])?;
                delta = delta.max((&vhat - &v[k][i]).norm());
                v[k][i] = &v[k][i] * (1.0 - theta) + vhat * theta;
                let dxh = hamiltonian::dx_hamiltonian_cached(
                    model, &coefs[k], &x[k][i], &views[k], &v[k][i], &pb, &q[k][i],
                );
                p[k][i] = pb + dxh * dt;
            }
        }
        if delta <= params.picard_tol || (iter + 1 == params.picard_max && delta <= 1e3 * params.picard_tol)
        {
            // Undamped polish sweep: pin every control to the exact
            // minimizer so the first-order optimality condition holds to
            // Newton tolerance at every node, and record the worst residual.
            let mut opt_resid = 0.0f64;
            for k in (0..kk).rev() {
                let cond = Conditioner::new(&x[k]);
                let targets = DMatrix::from_fn(nn, n, |i, c| p[k + 1][i][c]);
                let pbar = cond.fit(&targets);
                let resid = &targets - &pbar;
                for j in 0..n {
                    let qt = DMatrix::from_fn(nn, n, |i, c| resid[(i, c)] * dw[k][i][j] / dt);
                    let qfit = cond.fit(&qt);
                    for i in 0..nn {
                        for c in 0..n {
                            q[k][i][(c, j)] = qfit[(i, c)];
                        }
                    }
                }
                for i in 0..nn {
                    let pb = DVector::from_fn(n, |c, _| pbar[(i, c)]);
                    let vhat = hamiltonian::minimize_v_cached(
                        model, &coefs[k], &x[k][i], &views[k], &pb, &q[k][i],
                    )?;
                    opt_resid = opt_resid.max(hamiltonian::optimality_residual_cached(
                        model, &coefs[k], &x[k][i], &views[k], &vhat, &pb, &q[k][i],
                    ));
                    v[k][i] = vhat;
                    let dxh = hamiltonian::dx_hamiltonian_cached(
                        model, &coefs[k], &x[k][i], &views[k], &v[k][i], &pb, &q[k][i],
                    );
                    p[k][i] = pb + dxh * dt;
                }
            }
            v[kk] = v[kk - 1].clone();
            return Ok(FbsdeSolution {
                grid,
                x,
                p,
                q,
                v,
                dw: dw.to_vec(),
                picard_iterations: iter + 1,
                max_optimality_residual: opt_resid,
            });
        }
    }
    Err(MfgError::PicardDivergence(format!(
        "control iteration did not reach tolerance {} in {} sweeps",
        params.picard_tol, params.picard_max
    )))
}

/// Control problem along a frozen measure flow, all particles starting at
/// the same point x0 with independent noise.
pub fn solve_control(
    model: &ModelSpec,
    flow: &MeasureFlow,
    x0: &DVector<f64>,
    params: &SolverParams,
) -> Result<FbsdeSolution> {
    if x0.len() != model.n {
        return Err(MfgError::Dimension("starting point does not match state dimension".into()));
    }
    if flow.grid.steps != params.steps {
        return Err(MfgError::Config("measure flow grid does not match solver steps".into()));
    }
    let grid = flow.grid;
    let dw = brownian_increments(params.seed, model.n, params.particles, grid.steps, grid.dt());
    let starts = vec![x0.clone(); params.particles];
    let views = flow.scaled_views(model);
    solve_inner(model, grid, &starts, &views, &dw, params)
}

fn resample_starts(mu: &ParticleMeasure, count: usize, seed: u64) -> Vec<DVector<f64>> {
    if mu.len() == count {
        return mu.points().to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5353_7461_7274);
    (0..count).map(|_| mu.point(rng.gen_range(0..mu.len())).clone()).collect()
}

fn flow_distance(a: &MeasureFlow, b: &MeasureFlow) -> Result<f64> {
    // Exact Wasserstein at a handful of checkpoints; in higher dimension
    // with large clouds, fall back to a moment distance to keep the
    // stopping rule cheap.
    let kk = a.grid.steps;
    let checks = [kk / 4, kk / 2, 3 * kk / 4, kk];
    let mut worst = 0.0f64;
    for &k in &checks {
        let (ca, cb) = (&a.clouds[k], &b.clouds[k]);
        let dist = if ca.dim() == 1 || ca.len() <= 512 {
            crate::measure::w2_distance(ca, cb)?
        } else {
            ((ca.mean() - cb.mean()).norm_squared() + (ca.second_moment() - cb.second_moment()).norm())
                .sqrt()
        };
        worst = worst.max(dist);
    }
    Ok(worst)
}

fn solve_mfg_stage(
    model: &ModelSpec,
    grid: TimeGrid,
    starts: &[DVector<f64>],
    dw: &[Vec<DVector<f64>>],
    init: MeasureFlow,
    params: &SolverParams,
) -> Result<(FbsdeSolution, MeasureFlow)> {
    let theta = params.flow_damping;
    let mut flow = init;
    let mut best = f64::INFINITY;
    for _iter in 0..params.flow_max {
        let views = flow.scaled_views(model);
        let sol = solve_inner(model, grid, starts, &views, dw, params)?;
        // Damped pathwise blending of the clouds.
        let blended: Vec<Vec<DVector<f64>>> = (0..=grid.steps)
            .map(|k| {
                (0..starts.len())
                    .map(|i| flow.clouds[k].point(i) * (1.0 - theta) + &sol.x[k][i] * theta)
                    .collect()
            })
            .collect();
        let new_flow = MeasureFlow::from_paths(grid, &blended)?;
        let dist = flow_distance(&flow, &new_flow)?;
        flow = new_flow;
        if dist <= params.flow_tol {
            // Final pass so the returned trajectories are consistent with
            // the returned flow.
            let views = flow.scaled_views(model);
            let sol = solve_inner(model, grid, starts, &views, dw, params)?;
            return Ok((sol, flow));
        }
        best = best.min(dist);
        if dist > 10.0 * best.max(params.flow_tol) {
            return Err(MfgError::FlowDivergence(dist, best));
        }
    }
    Err(MfgError::FlowDivergence(best, params.flow_tol))
}

/// Equilibrium solve from an initial measure at time t0: an outer fixed
/// point on the measure flow around the inner control solve. If the direct
/// iteration diverges, the coupling strength is homotoped up the ladder
/// 0.25, 0.5, 0.75, 1.0, warm-starting each stage from the previous flow.
pub fn solve_mfg(
    model: &ModelSpec,
    grid: TimeGrid,
    mu0: &ParticleMeasure,
    params: &SolverParams,
) -> Result<(FbsdeSolution, MeasureFlow)> {
    if mu0.dim() != model.n {
        return Err(MfgError::Dimension("initial measure does not match state dimension".into()));
    }
    let dw = brownian_increments(params.seed, model.n, params.particles, grid.steps, grid.dt());
    let starts = resample_starts(mu0, params.particles, params.seed);
    let start_cloud = ParticleMeasure::new(starts.clone())?;
    let init = MeasureFlow::stationary(grid, &start_cloud);
    if model.is_measure_decoupled() {
        // The inner solve does not read the measure: the first pass is
        // already the equilibrium.
        let views = init.scaled_views(model);
        let sol = solve_inner(model, grid, &starts, &views, &dw, params)?;
        let flow = MeasureFlow::from_paths(grid, &sol.x)?;
        return Ok((sol, flow));
    }
    match solve_mfg_stage(model, grid, &starts, &dw, init.clone(), params) {
        Ok(out) => Ok(out),
        Err(MfgError::FlowDivergence(..)) | Err(MfgError::PicardDivergence(..)) => {
            let mut flow = init;
            let mut out = None;
            for lambda in [0.25, 0.5, 0.75, 1.0] {
                let scaled = model.with_coupling_scale(model.coupling_scale * lambda);
                let (sol, new_flow) =
                    solve_mfg_stage(&scaled, grid, &starts, &dw, flow.clone(), params)?;
                flow = new_flow.clone();
                out = Some((sol, new_flow));
            }
            Ok(out.expect("ladder has stages"))
        }
        Err(e) => Err(e),
    }
}

/// Discrete backward-equation residual: the sample root mean square of
/// p_{k+1} - p_k - (driver and martingale increments) over all particles
/// and steps. Small values certify internal consistency of a solution.
pub fn bsde_residual(model: &ModelSpec, sol: &FbsdeSolution, flow: &MeasureFlow) -> f64 {
    let views = flow.scaled_views(model);
    let dt = sol.grid.dt();
    let kk = sol.grid.steps;
    let nn = sol.particles();
    let mut acc = 0.0;
    for k in 0..kk {
        let coefs = model.step_coefs(sol.grid.time(k), &views[k]);
        for i in 0..nn {
            let dxh = hamiltonian::dx_hamiltonian_cached(
                model,
                &coefs,
                &sol.x[k][i],
                &views[k],
                &sol.v[k][i],
                &sol.p[k][i],
                &sol.q[k][i],
            );
            let pred = &sol.p[k][i] - dxh * dt + &sol.q[k][i] * &sol.dw[k][i];
            acc += (&sol.p[k + 1][i] - pred).norm_squared();
        }
    }
    (acc / (kk * nn) as f64).sqrt()
}

/// Sensitivity probe: solves the control problem from x0 and from a
/// perturbed start with the same noise and reports the ratio of costate
/// displacement to state displacement, a sample Lipschitz estimate of
/// x -> p(t).
pub fn stability_probe(
    model: &ModelSpec,
    flow: &MeasureFlow,
    x0: &DVector<f64>,
    eps: f64,
    params: &SolverParams,
) -> Result<f64> {
    let base = solve_control(model, flow, x0, params)?;
    let mut shifted = x0.clone();
    shifted[0] += eps;
    let bumped = solve_control(model, flow, &shifted, params)?;
    Ok((bumped.mean_p0() - base.mean_p0()).norm() / eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lq;

    fn tanh_spec() -> ModelSpec {
        lq::to_model_spec(&lq::LqModel::scalar_benchmark(0.3, 1.0)).unwrap()
    }

    fn quick_params() -> SolverParams {
        SolverParams { particles: 2000, steps: 40, seed: 42, ..SolverParams::default() }
    }

    #[test]
    fn regression_recovers_conditional_mean() {
        // targets y = 2 + 3x - x^2 + noise; the quadratic basis is exact in
        // expectation.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<DVector<f64>> =
            (0..4000).map(|_| DVector::from_element(1, rng.gen_range(-2.0..2.0))).collect();
        let t = DMatrix::from_fn(4000, 1, |i, _| {
            let x = xs[i][0];
            2.0 + 3.0 * x - x * x + 0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        let cond = Conditioner::new(&xs);
        let fit = cond.fit(&t);
        for (i, x) in xs.iter().enumerate().step_by(500) {
            let expect = 2.0 + 3.0 * x[0] - x[0] * x[0];
            assert!((fit[(i, 0)] - expect).abs() < 0.02);
        }
    }

    #[test]
    fn degenerate_basis_falls_back_to_sample_mean() {
        let xs = vec![DVector::from_element(1, 1.5); 100];
        let t = DMatrix::from_fn(100, 1, |i, _| i as f64);
        let cond = Conditioner::new(&xs);
        let fit = cond.fit(&t);
        for i in 0..100 {
            assert!((fit[(i, 0)] - 49.5).abs() < 1e-8);
        }
    }

    #[test]
    fn control_costate_matches_riccati_gradient() {
        // p(0) = V2(0) x = tanh(1) x for the scalar benchmark.
        let model = tanh_spec();
        let params = quick_params();
        let grid = TimeGrid::new(0.0, 1.0, params.steps).unwrap();
        let mu = ParticleMeasure::from_scalars(&[1.0]).unwrap();
        let flow = MeasureFlow::stationary(grid, &mu);
        for x0 in [0.5, 1.5] {
            let sol = solve_control(&model, &flow, &DVector::from_element(1, x0), &params).unwrap();
            let p0 = sol.mean_p0()[0];
            let expect = 1.0f64.tanh() * x0;
            // Monte Carlo noise at this particle count allows a few percent.
            assert!(
                (p0 - expect).abs() <= 0.05 * expect.abs().max(1.0),
                "p(0) = {p0}, expected {expect}"
            );
            // terminal condition holds exactly pathwise
            for i in (0..sol.particles()).step_by(333) {
                assert_eq!(sol.p[params.steps][i][0], 0.0);
            }
        }
    }

    #[test]
    fn deterministic_control_matches_shooting_solution() {
        // With sigma = 0 the optimal path is x(s) = x cosh(1-s)/cosh(1).
        let model = lq::to_model_spec(&lq::LqModel::scalar_benchmark(0.0, 1.0)).unwrap();
        let params = SolverParams { particles: 8, steps: 200, seed: 5, ..SolverParams::default() };
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let mu = ParticleMeasure::from_scalars(&[0.0]).unwrap();
        let flow = MeasureFlow::stationary(grid, &mu);
        let sol = solve_control(&model, &flow, &DVector::from_element(1, 1.0), &params).unwrap();
        for k in [0usize, 50, 100, 150, 200] {
            let s = grid.time(k);
            let expect = (1.0 - s).cosh() / 1.0f64.cosh();
            assert!(
                (sol.x[k][0][0] - expect).abs() <= 5e-3,
                "x({s}) = {}, expected {expect}",
                sol.x[k][0][0]
            );
        }
        assert!((sol.mean_p0()[0] - 1.0f64.tanh()).abs() <= 5e-3);
    }

    #[test]
    fn bsde_residual_is_small_on_converged_solution() {
        let model = tanh_spec();
        let params = quick_params();
        let grid = TimeGrid::new(0.0, 1.0, params.steps).unwrap();
        let mu = ParticleMeasure::from_scalars(&[0.5]).unwrap();
        let flow = MeasureFlow::stationary(grid, &mu);
        let sol = solve_control(&model, &flow, &DVector::from_element(1, 1.0), &params).unwrap();
        // The residual carries the one-step regression error; it must stay
        // below the time step itself.
        assert!(bsde_residual(&model, &sol, &flow) < grid.dt());
    }

    #[test]
    fn mfg_agrees_with_control_for_decoupled_model() {
        let model = tanh_spec();
        let params = quick_params();
        let grid = TimeGrid::new(0.0, 1.0, params.steps).unwrap();
        let mu = ParticleMeasure::from_scalars(&[1.0]).unwrap();
        let (sol, flow) = solve_mfg(&model, grid, &mu, &params).unwrap();
        let ctrl = solve_control(&model, &flow, &DVector::from_element(1, 1.0), &params).unwrap();
        // Same starting point, same noise: identical fixed points up to
        // solver tolerance.
        assert!((sol.mean_p0() - ctrl.mean_p0()).norm() < 1e-3);
        // Equilibrium mean flow matches the oracle mean ODE.
        let lqm = lq::LqModel::scalar_benchmark(0.3, 1.0);
        let oracle = lq::solve_lq(
            &lqm,
            0.0,
            &DVector::from_element(1, 1.0),
            &DMatrix::zeros(1, 1),
            params.steps,
        )
        .unwrap();
        for k in [10usize, 20, 30, 40] {
            let got = flow.views[k].mean[0];
            assert!(
                (got - oracle.mean[k][0]).abs() < 0.05,
                "mean({k}) = {got} vs {}",
                oracle.mean[k][0]
            );
        }
    }

    #[test]
    fn mean_coupled_mfg_matches_oracle_mean_flow() {
        let mut lqm = lq::LqModel::scalar_benchmark(0.3, 1.0);
        lqm.f1_mean = DMatrix::from_element(1, 1, 0.5);
        let model = lq::to_model_spec(&lqm).unwrap();
        let params = quick_params();
        let grid = TimeGrid::new(0.0, 1.0, params.steps).unwrap();
        let mu = ParticleMeasure::from_scalars(&[1.0]).unwrap();
        let (_sol, flow) = solve_mfg(&model, grid, &mu, &params).unwrap();
        let oracle = lq::solve_lq(
            &lqm,
            0.0,
            &DVector::from_element(1, 1.0),
            &DMatrix::zeros(1, 1),
            params.steps,
        )
        .unwrap();
        for k in [10usize, 25, 40] {
            let got = flow.views[k].mean[0];
            assert!(
                (got - oracle.mean[k][0]).abs() < 0.05,
                "mean({k}) = {got} vs {}",
                oracle.mean[k][0]
            );
        }
    }

    #[test]
    fn stability_probe_estimates_riccati_gain() {
        // d p(0) / d x = V2(0) = tanh(1).
        let model = tanh_spec();
        let params = quick_params();
        let grid = TimeGrid::new(0.0, 1.0, params.steps).unwrap();
        let mu = ParticleMeasure::from_scalars(&[0.0]).unwrap();
        let flow = MeasureFlow::stationary(grid, &mu);
        // A macroscopic perturbation keeps the finite difference above the
        // regression noise floor of the two solves.
        let lip =
            stability_probe(&model, &flow, &DVector::from_element(1, 1.0), 2.0, &params).unwrap();
        assert!((lip - 1.0f64.tanh()).abs() < 0.15, "gain {lip}");
    }

    #[test]
    fn solver_is_deterministic_for_fixed_seed() {
        let model = tanh_spec();
        let params = SolverParams { particles: 300, steps: 20, seed: 9, ..SolverParams::default() };
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let mu = ParticleMeasure::from_scalars(&[1.0]).unwrap();
        let a = solve_mfg(&model, grid, &mu, &params).unwrap();
        let b = solve_mfg(&model, grid, &mu, &params).unwrap();
        assert_eq!(a.0.mean_p0(), b.0.mean_p0());
        assert_eq!(a.1.views[10].mean, b.1.views[10].mean);
    }
}
